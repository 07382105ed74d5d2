from setuptools import setup

setup(
    name="mcqa-lens",
    version="1.0.0",
    py_modules=[
        "config",
        "errors",
        "tensor_ops",
        "prompts",
        "transformer",
        "checkpoint_utils",
        "interpretability",
        "evaluation",
        "trainer",
        "report_utils",
        "cli",
    ],
    install_requires=[
        "numpy==1.26.4",
        "scipy==1.11.4",
        "reportlab==4.0.7",
        "tqdm==4.66.1",
    ],
    extras_require={"test": ["pytest==7.4.3"]},
    entry_points={"console_scripts": ["mcqa-lens=cli:main"]},
    python_requires=">=3.11,<3.12",
)
