"""Build the optional Cython kernel module.

If Cython is unavailable or compilation fails, the package still installs and
``maskreduce.kernels`` falls back to the numpy implementation at import.
"""
import warnings

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # noqa: BLE001
            warnings.warn(f"Cython kernels not built, using pure-Python fallback: {exc}")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # noqa: BLE001
            warnings.warn(f"failed to build {ext.name}: {exc}")


try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "maskreduce._ckernels",
                ["src/maskreduce/_ckernels.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "initializedcheck": False,
        },
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions, cmdclass={"build_ext": OptionalBuildExt})
