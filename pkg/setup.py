from setuptools import Extension, setup

# The compiled kernel is an optional speedup: the package falls back to the
# numpy implementation in popmeta._nn_numpy when the extension is missing.
try:
    import numpy as np
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "popmeta._nn_kernels",
                ["src/popmeta/_nn_kernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
