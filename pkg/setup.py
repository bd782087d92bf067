from setuptools import setup, find_packages

setup(
    name="eat-ood",
    version="0.1.0",
    packages=find_packages(where="src"),
    package_dir={"": "src"},
    install_requires=[
        "numpy>=1.24.0",
        "pydantic>=2.0.0",
        "python-dotenv>=1.0.0",
        "rich>=13.0.0",
    ],
    extras_require={
        "test": [
            "pytest>=7.0.0",
            "scikit-learn>=1.2.0",
        ],
    },
    python_requires=">=3.8",
    entry_points={
        "console_scripts": [
            "eat-ood=eat_ood.main:main",
        ],
    },
)
