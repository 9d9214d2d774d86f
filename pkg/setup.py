from setuptools import setup, find_packages

setup(name='pfo_fdir',
      version='0.1.0',
      description='Density-space fault detection, isolation and recovery with learned Perron-Frobenius operators.',
      scripts=["scripts/run_experiment.py"],
      packages=find_packages(include=["pfo_fdir", "pfo_fdir.*"]),
      entry_points={"console_scripts": ["pfo-fdir=pfo_fdir.cli:main"]},
      install_requires=['torch', 'numpy', 'scipy', 'POT', 'scikit-learn', 'hydra-core', 'omegaconf', 'tqdm',
                        'pandas', 'opt_einsum'],
      extras_require={"test": ['pytest']})
