import os

import numpy as np
from setuptools import Extension, setup

# The compiled kernel core is optional: set ADVSEQ_SKIP_EXT=1 to install the
# pure-NumPy build (the package selects the fallback backend at import).
if os.environ.get("ADVSEQ_SKIP_EXT"):
    ext_modules = []
else:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "advseq._kernels._native",
                ["src/advseq/_kernels/_native.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        language_level="3",
    )

setup(ext_modules=ext_modules)
