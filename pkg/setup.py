"""Build script: compiles the optional key-rewrite extension when Cython is present.

The package works without the extension; wotgw.codec falls back to the
pure-Python kernel at import time.
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "wotgw._kernel_cy",
                ["src/wotgw/_kernel_cy.pyx"],
                extra_compile_args=["-O2"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
