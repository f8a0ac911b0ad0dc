import os

import numpy as np
from setuptools import Extension, setup

# TISSUESCAN_NO_EXT=1 skips the compiled core; the package then runs on the
# numpy fallback kernels.
ext_modules = []
if not os.environ.get("TISSUESCAN_NO_EXT"):
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "tissuescan._kernels",
                ["src/tissuescan/_kernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
