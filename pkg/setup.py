import os
from setuptools import setup, find_packages

BASEDIR = os.path.dirname(os.path.abspath(__file__))
VERSION = open(os.path.join(BASEDIR, 'VERSION')).read().strip()

# Dependencies (format is 'PYPI_PACKAGE_NAME[>=]=VERSION_NUMBER')
BASE_DEPENDENCIES = [
    'pandas>=1.3.0',
    'numpy>=1.20.0',
    'scipy>=1.6.0',
    'networkx>=2.4',
    'tqdm>=4.42.0',
    'sacrebleu>=2.0.0',
    'python-slugify>=4.0.0',
    'matplotlib>=3.1.2',
    'seaborn>=0.11.0',
    'attrs>=19.3.0'
]

TEST_DEPENDENCIES = [
    'pytest>=6.0.0'
]

# Allow setup.py to be run from any path
os.chdir(os.path.normpath(BASEDIR))

setup(
    name='nat-lattice',
    packages=find_packages(exclude=['tests']),
    version=VERSION,
    include_package_data=True,
    description='Objectives, decoders and analysis tools for non-autoregressive translation lattices',
    long_description=open('README.md').read(),
    install_requires=BASE_DEPENDENCIES,
    tests_require=TEST_DEPENDENCIES,
    extras_require = {
        'test': TEST_DEPENDENCIES
    },
    entry_points={
        'console_scripts': [
            'nat-lattice=nat_lattice.cli:main'
        ]
    },
    keywords=['machine translation', 'non-autoregressive'],
    classifiers=[
        'Intended Audience :: Developers',
        'License :: OSI Approved :: MIT License',
        'Operating System :: OS Independent',
        'Programming Language :: Python',
    ]
)
