from setuptools import setup, find_packages

setup(
    name="overlap-bench",
    version="0.1.0",
    packages=find_packages(exclude=["tests", "tests.*"]),
    py_modules=["main"],
    python_requires=">=3.8",
    install_requires=[
        'numpy>=1.24.0',
        'pandas>=2.0.0',
        'python-dotenv>=1.0.0',
        'tqdm>=4.65.0',
        'psutil>=5.9.0'
    ],
    extras_require={
        'test': [
            'pytest>=7.3.1',
            'hypothesis>=6.0.0'
        ],
    },
    entry_points={
        'console_scripts': [
            'overlap-bench=main:cli_main',
        ],
    },
)
