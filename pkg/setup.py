import numpy as np
from setuptools import Extension, setup
from Cython.Build import cythonize

ext = Extension(
    "panodet.kernels.cyknl",
    ["src/panodet/kernels/cyknl.pyx"],
    include_dirs=[np.get_include()],
    extra_compile_args=["-O3", "-march=native", "-funroll-loops"],
    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
)

setup(ext_modules=cythonize([ext], language_level=3))
