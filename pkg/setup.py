import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

ext = Extension(
    "tbsfm._ckernels",
    ["src/tbsfm/_ckernels.pyx"],
    include_dirs=[np.get_include()],
    extra_compile_args=["-O3", "-ffp-contract=off"],
)

setup(ext_modules=cythonize([ext], compiler_directives={"language_level": 3}))
