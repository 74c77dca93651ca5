import setuptools

with open("README.md", "r") as fh:
    long_description = fh.read()

setuptools.setup(
    name="mapgan",
    packages=setuptools.find_packages(),
    license="MIT",
    version="0.1.0",
    description="Satellite-to-map translation with a conditional GAN on a numpy autodiff engine",
    long_description=long_description,
    long_description_content_type="text/markdown",
    install_requires=["numpy>=1.17", "Pillow>=7.0", "bitstring>=3.0.2"],
    test_suite="nose2.collector",
    include_package_data=True,
    entry_points={"console_scripts": ["mapgan = mapgan.tools.cli:main"]},
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Programming Language :: Python :: 3",
        "Topic :: Scientific/Engineering :: Image Processing",
    ],
    python_requires=">=3.7",
)
