"""Builds the optional compiled edit-distance kernel; the package works without it."""
from setuptools import setup

ext_modules = []
try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python fallback only
    pass
else:
    ext_modules = cythonize(["src/jamt/_editdist.pyx"], quiet=True)

setup(ext_modules=ext_modules)
