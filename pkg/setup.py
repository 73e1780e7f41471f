import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

ext = Extension(
    "siag._ckernels",
    ["src/siag/_ckernels.pyx"],
    include_dirs=[np.get_include()],
    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    # keep a*b+c unfused so results match a sequential scalar evaluation
    extra_compile_args=["-O3", "-ffp-contract=off"],
)

setup(ext_modules=cythonize([ext], compiler_directives={"language_level": 3}))
