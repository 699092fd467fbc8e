import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("LRX_NO_EXT", "") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:  # fall back to the pure-Python kernel
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [
                Extension(
                    "lrxvec._jacobi",
                    ["src/lrxvec/_jacobi.pyx"],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
