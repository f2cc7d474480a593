import os
import sys

from setuptools import setup


def extensions():
    if os.environ.get("DAGAF_NO_EXT"):
        return []
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        print("Cython/numpy not available; installing pure-Python kernels only", file=sys.stderr)
        return []
    compile_args = ["-O3"]
    libraries = []
    if sys.platform.startswith("linux"):
        # vectorised exp() from glibc's libmvec
        compile_args += ["-ffast-math"]
        if not os.environ.get("DAGAF_PORTABLE"):
            compile_args += ["-march=native"]
        libraries = ["mvec", "m"]
    ext = Extension(
        "dagaf._kernels",
        ["src/dagaf/_kernels.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=compile_args,
        libraries=libraries,
    )
    return cythonize([ext], language_level=3)


setup(ext_modules=extensions())
