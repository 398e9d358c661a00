import os

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

compile_args = ["-O3"]
if os.environ.get("PAINMETER_PORTABLE") != "1":
    compile_args.append("-march=native")

extensions = [
    Extension(
        "painmeter.nn._ckernels",
        ["src/painmeter/nn/_ckernels.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=compile_args,
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
)
