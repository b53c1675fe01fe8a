from setuptools import Extension, setup
from Cython.Build import cythonize

ext = Extension("fanpipe._kernels", ["src/fanpipe/_kernels.pyx"])

setup(
    ext_modules=cythonize([ext], language_level="3"),
)
