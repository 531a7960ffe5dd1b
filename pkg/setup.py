import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "voxelxai.backends._native",
                ["src/voxelxai/backends/_native.pyx"],
            )
        ],
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
except ImportError:
    # pure-Python install; the numpy backend is used at runtime
    extensions = []

setup(ext_modules=extensions, include_dirs=[np.get_include()])
