from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [Extension("misa._kernels", ["src/misa/_kernels.pyx"], extra_compile_args=["-O3", "-ffast-math", "-fno-finite-math-only", "-march=native"],
                   extra_link_args=["-lmvec"])],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
