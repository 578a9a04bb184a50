"""Build script for the optional compiled kernel extension.

The package is fully functional without the extension (a numpy fallback
is selected at import); the extension is marked optional so a missing
compiler or Cython never blocks installation.
"""

from setuptools import Extension, setup


def extensions():
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        return []
    ext = Extension(
        "tokendiff.kernels._compiled",
        ["src/tokendiff/kernels/_compiled.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        optional=True,
    )
    return cythonize([ext], language_level=3)


setup(ext_modules=extensions())
