import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "octcvd._kernels",
        ["src/octcvd/_kernels.pyx"],
        include_dirs=[np.get_include()],
        # no -ffast-math: the fallback must reproduce these results bit for bit
        extra_compile_args=["-O3", "-ffp-contract=off"],
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={"language_level": "3"},
    )
)
