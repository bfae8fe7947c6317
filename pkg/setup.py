import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# -ffp-contract=off: no FMA fusion, so the compiled kernels produce the same
# bits as the pure-Python reference backend (required for the tile-vs-scalar
# equivalence guarantees).
extensions = [
    Extension(
        "budd._kernels._core",
        ["src/budd/_kernels/_core.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3", "-ffp-contract=off"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

setup(ext_modules=cythonize(extensions, language_level=3))
