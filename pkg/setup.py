import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    # Pure-Python install still works; the package falls back to the
    # numpy reference loop at import time.
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "phasegate._speedups",
                ["src/phasegate/_speedups.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )

setup(ext_modules=ext_modules)
