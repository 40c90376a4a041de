from setuptools import setup, find_packages
from pathlib import Path

readme = Path(__file__).with_name("README.md").read_text(encoding="utf-8")

setup(
    name="tzcvm-sim",
    version="0.1.0",
    description="Deterministic simulator of a TrustZone confidential-VM monitor, its host and guests",
    long_description=readme,
    long_description_content_type="text/markdown",
    packages=find_packages(exclude=["tests*", "examples*"]),
    py_modules=["orchestrator"],
    include_package_data=True,
    python_requires=">=3.9",
    install_requires=[
        "python-dotenv>=1.0.0",
        "pandas>=2.0.0",
        "numpy>=1.24.0",
        "tabulate>=0.9.0",
        "pydantic>=2.0",              # Pydantic v2
        "pydantic-settings>=2.2.1",
        "tenacity>=8.2.0",
        "cryptography>=41.0.0",       # Ed25519, AES-XTS/GCM, HKDF
    ],
    extras_require={
        "test": [
            "pytest>=7.4",
            "hypothesis>=6.90",
        ],
    },
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ],
    entry_points={
        "console_scripts": [
            "tzcvm-sim=orchestrator:main",
        ],
    },
)
