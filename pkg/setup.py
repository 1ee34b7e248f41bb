"""Build script for the optional compiled kernel extension.

The package is fully functional without the extension (a NumPy fallback is
selected at import time), so a failed compile only emits a warning instead of
aborting the install.
"""

import warnings

from setuptools import setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    """Build the Cython kernels if possible, otherwise install without them."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler or Cython missing
            warnings.warn(f"compiled kernels skipped ({exc}); using NumPy fallback")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            warnings.warn(f"compiled kernels skipped ({exc}); using NumPy fallback")


def extensions():
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        return []
    return cythonize(
        [
            Extension(
                "daf.numerics.kernels._core",
                ["src/daf/numerics/kernels/_core.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )


setup(ext_modules=extensions(), cmdclass={"build_ext": OptionalBuildExt})
