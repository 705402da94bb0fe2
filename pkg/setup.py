"""Build the optional compiled kernels; the package still works without them."""
import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("FOCKDAMP_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "fockdamp._core._kernels",
                    ["src/fockdamp/_core/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
