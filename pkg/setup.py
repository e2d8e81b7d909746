"""Builds the optional compiled kernels; the package falls back to numpy without them."""
import os
import sys

from setuptools import setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler or Cython missing
            print(f"warning: compiled kernels not built ({exc}); using the numpy fallback", file=sys.stderr)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
            return
        except Exception as exc:
            if not getattr(ext, "portable_args", None):
                print(f"warning: failed to build {ext.name} ({exc}); using the numpy fallback", file=sys.stderr)
                return
        # retry without host-specific vectorization flags
        ext.extra_compile_args, ext.extra_link_args = ext.portable_args, []
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"warning: failed to build {ext.name} ({exc}); using the numpy fallback", file=sys.stderr)


def extensions():
    if os.environ.get("SWINDR_NO_EXT"):
        return []
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        return []
    from setuptools import Extension

    common = dict(
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    # elementwise NN kernels: vectorized erf/exp from libmvec
    nn = Extension(
        "swindr._nn",
        ["src/swindr/_nn.pyx"],
        extra_compile_args=["-O3", "-march=native", "-ffast-math", "-fopenmp-simd"],
        extra_link_args=["-lmvec"],
        **common,
    )
    # image kernels must match the numpy fallback bit for bit
    img = Extension(
        "swindr._img",
        ["src/swindr/_img.pyx"],
        extra_compile_args=["-O2", "-ffp-contract=off"],
        **common,
    )
    exts = cythonize([nn, img], compiler_directives={"language_level": 3})
    exts[0].portable_args = ["-O3"]
    return exts


setup(ext_modules=extensions(), cmdclass={"build_ext": OptionalBuildExt})
