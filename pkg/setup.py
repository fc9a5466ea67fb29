from setuptools import setup, find_namespace_packages

setup(name='sfr',
      version='0.1',
      description='spatial feature reconstruction for partial-pattern matching',
      license='MIT',
      packages=find_namespace_packages(include=["sfr", "sfr.*"]),
      install_requires=['numpy', 'scipy', 'pandas', 'tqdm', 'docopt'],
      entry_points={'console_scripts': ['sfr=sfr.cli:main']},
      zip_safe=False)
