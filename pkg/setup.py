import sys

from setuptools import Extension, setup

# The max-flow kernel is optional at build time: if Cython or a C compiler is
# unavailable the package installs anyway and selects the pure-Python kernel
# at import.
ext_modules = []
try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "weakseg.maxflow._dinic_c",
                ["src/weakseg/maxflow/_dinic_c.pyx"],
            )
        ],
        language_level=3,
    )
except Exception as exc:  # pragma: no cover - build environment dependent
    print(f"weakseg: skipping compiled max-flow kernel ({exc})", file=sys.stderr)

setup(ext_modules=ext_modules)
