"""Build the optional compiled tape kernels.

The package works without them; ``mixfit.autodiff`` falls back to the
pure-Python tape when ``_tape_ext`` cannot be imported.
"""
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

ext_modules = []
if cythonize is not None:
    ext_modules = cythonize(
        [
            Extension(
                "mixfit.autodiff._tape_ext",
                ["src/mixfit/autodiff/_tape_ext.pyx"],
                language="c++",
                extra_compile_args=["-O3"],
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
