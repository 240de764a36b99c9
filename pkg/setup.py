"""Builds the optional compiled kernel core.

The package is fully functional without it (a numpy fallback is selected at
import time); building the extension speeds up training several-fold:

    pip install -e . --no-build-isolation
or
    python3 setup.py build_ext --inplace
"""

from setuptools import Extension, setup

try:
    import numpy as np
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "owislab._kernels._ext",
                ["src/owislab/_kernels/_ext.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
