from setuptools import setup

package_name = "sound_brush"

setup(
    name=package_name,
    version="1.0.0",
    packages=[package_name],
    package_data={package_name: ["resource/*.json", "resource/*.txt"]},
    install_requires=[
        "setuptools",
        "numpy<2",
        "opencv-python>=4.8.1.78",
        "typing-extensions>=4.4.0",
        "torch>=2.1",
        "scipy>=1.10",
        "librosa>=0.10",
        "soundfile>=0.12",
        "tqdm>=4.65",
    ],
    zip_safe=True,
    maintainer="Miguel Ángel González Santamarta",
    maintainer_email="mgons@unileon.es",
    description="Sound-guided image editing with audio tokens and LoRA",
    license="GPL-3",
    extras_require={"test": ["pytest"]},
    entry_points={
        "console_scripts": [
            "sound_brush = sound_brush.cli:main",
        ],
    },
)
