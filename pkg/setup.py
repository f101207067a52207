"""Optional compiled kernels; the package falls back to numpy when the build is skipped."""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("RIGIDFLOW_NO_EXT", "") != "1":
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "rigidflow._kernels",
                    ["src/rigidflow/_kernels.pyx"],
                    include_dirs=[numpy.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": 3},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
