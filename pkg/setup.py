import ctypes.util
import os

from setuptools import setup

ext_modules = []
if os.environ.get("ERP_FORGE_PURE", "") not in ("1", "true", "yes"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        # -ffast-math lets gcc vectorise expf/tanh through glibc's libmvec
        if ctypes.util.find_library("mvec"):
            cflags, ldflags = ["-O3", "-ffast-math"], ["-lmvec"]
        else:
            cflags, ldflags = ["-O3", "-fno-math-errno"], []
        ext_modules = cythonize(
            [
                Extension(
                    "erp_forge._kernels",
                    ["src/erp_forge/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=cflags,
                    extra_link_args=ldflags,
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        # no Cython/numpy at build time: install the pure-Python fallback only
        ext_modules = []

setup(ext_modules=ext_modules)
