from setuptools import setup

setup(
    name='STDD',
    version='1.0',
    packages=['STDD'],
    license='MIT',
    description='Spatio-temporal drone-to-drone detection: training, inference and evaluation on video',
    scripts=[
        'bin/{}'.format(x) for x in ['stdd']
    ],
    install_requires=[
        'coverage',
        'decorator',
        'hypothesis',
        'numpy',
        'opencv-python-headless',
        'torch',
    ]
)
