"""GAN image colorizer with a shifted-window attention bottleneck.

The package is a self-contained numpy implementation — model, reverse-mode
autodiff, training loop, and metrics — organized as:

- ``tensor``     reverse-mode autodiff over numpy arrays
- ``kernels``    conv data-movement kernels (compiled + numpy backends)
- ``colorspace`` sRGB/CIELAB conversion, PNG I/O, differentiable rebuild
- ``swin``       shifted-window attention blocks
- ``model``      generator, patch critic, frozen feature backbone
- ``losses``     the four-term objective and critic constraints
- ``metrics``    PSNR / SSIM / colorfulness reporting
- ``config``     training configuration, profiles, key=value files
- ``checkpoint`` zip-container checkpoint format
- ``pipeline``   datasets, training loop, evaluation
- ``cli``        the ``swincolor`` command
- ``selftest``   fast invariant suite behind ``swincolor selftest``
"""

__version__ = "0.1.0"
