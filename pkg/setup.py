from setuptools import setup, find_packages

setup(
    name="piecewise-sir",
    version="1.0.0",
    packages=find_packages(exclude=['tests', 'tests.*']),
    python_requires='>=3.8',

    install_requires=[
        'numpy>=1.20',
        'scipy>=1.6',
        'pandas>=1.2',
        'scikit-learn>=0.24',
        'statsmodels>=0.12',
        'tomli>=1.1; python_version < "3.11"',
    ],
    extras_require={
        'test': ['pytest>=6.0'],
    },

    description="Change point detection and forecasting for piecewise stationary SIR models",
    classifiers=[
        'Topic :: Scientific/Engineering :: Mathematics',
        'Programming Language :: Python :: 3.8',
        'Programming Language :: Python :: 3.9',
        'Programming Language :: Python :: 3.10',
        'Programming Language :: Python :: 3.11',
    ],
    platforms=['any'],
    license="BSD",
    keywords=("sir epidemic change point fused lasso "
              "spatial forecasting var"),

    entry_points={'console_scripts': ['piecewise-sir=piecewise_sir.cli:main']})
