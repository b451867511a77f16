from setuptools import setup, find_packages

setup(
    name="inoculab",
    version="0.3.0",
    packages=find_packages(exclude=["tests", "tests.*"]),
    python_requires=">=3.9",
    install_requires=[
        "python-dotenv",
        "sqlalchemy>=2.0",
        "alembic",
        "torch",
        "torchvision",
        "numpy",
        "pandas",
        "pyyaml",
        "tqdm",
        "Pillow",
    ],
    extras_require={
        "test": ["pytest"],
    },
    entry_points={
        "console_scripts": [
            "inoculab=inoculab.main:main",
        ],
    },
)
