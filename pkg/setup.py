"""Build script: compiles the optional Cython kernel core.

The package works without the extension (a numpy fallback is selected at
import time); set SUFFIXCAST_NO_EXT=1 to force a pure-Python build.
"""

import os

from setuptools import Extension, setup


def _extensions():
    if os.environ.get("SUFFIXCAST_NO_EXT"):
        return []
    try:
        import numpy
        from Cython.Build import cythonize
    except ImportError:
        return []
    ext = Extension(
        "suffixcast.kernels._ckernels",
        ["src/suffixcast/kernels/_ckernels.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize(
        [ext],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )


setup(ext_modules=_extensions())
