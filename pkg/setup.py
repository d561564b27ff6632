"""Build script: compiles the optional closest-point Cython kernel.

The package works without the extension (a vectorized numpy fallback is
selected at import time), so a missing compiler or Cython only costs speed.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "morphflow.kernels._closest_point",
                ["src/morphflow/kernels/_closest_point.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )
except Exception as exc:  # pragma: no cover - build environment dependent
    print(f"morphflow: skipping compiled kernel ({exc}); numpy fallback will be used")

setup(ext_modules=ext_modules)
