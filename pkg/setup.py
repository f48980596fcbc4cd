#!/usr/bin/env python
# -*- coding: utf-8 -*-


try:
    from setuptools import setup
except ImportError:
    from distutils.core import setup


with open('README.rst') as readme_file:
    readme = readme_file.read()

with open('HISTORY.rst') as history_file:
    history = history_file.read()

requirements = [
    'torch>=1.13',
    'torchvision>=0.14',
    'numpy',
    'pillow',
    'pyyaml',
    'pandas',
    'matplotlib',
    'more-itertools',
    'blinker',
]


setup(
    name='pose_fewshot',
    version='1.0.0',
    description="Pose-normalized few-shot fine-grained recognition",
    long_description=readme + '\n\n' + history,
    author="Pose Few-Shot Developers",
    author_email='pose-fewshot@users.noreply.github.com',
    packages=[
        'pose_fewshot',
    ],
    package_dir={
        'pose_fewshot': 'pose_fewshot',
    },
    entry_points={
        'console_scripts': [
            'pose-fewshot = pose_fewshot.cli:main',
        ],
    },
    include_package_data=True,
    install_requires=requirements,
    extras_require={
        'speedups': ['simplejson'],
    },
    python_requires='>=3.8',
    license="ISCL",
    zip_safe=False,
    keywords='few-shot fine-grained pose-normalization',
    classifiers=[
        'Development Status :: 4 - Beta',
        'Intended Audience :: Science/Research',
        'License :: OSI Approved :: ISC License (ISCL)',
        'Natural Language :: English',
        'Programming Language :: Python :: 3',
        'Topic :: Scientific/Engineering :: Artificial Intelligence',
    ],
    setup_requires=['pytest-runner'],
    tests_require=['pytest', 'hypothesis'],
)
