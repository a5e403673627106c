"""Build script for the optional compiled kernels.

The package is pure Python plus one Cython extension holding the hot
loops (Jacobi orthogonalization sweeps and the fused Adam moment
update).  If Cython or a C compiler is unavailable the extension is
skipped and the package falls back to the numpy implementations in
``fira._kernels_py`` at import time.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "fira._kernels",
                ["src/fira/_kernels.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
