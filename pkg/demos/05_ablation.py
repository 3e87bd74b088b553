"""Strided convolution versus max pooling over two seeds.

With CIFAR-10 in COMPLAB_CIFAR_DIR this runs at small scale (about 40 minutes
per seed pair on one core); otherwise it falls back to a one-epoch tiny run on
generated images, which only exercises the machinery.

Run: python3 demos/05_ablation.py
"""
from complab import experiments as X

data = X.default_dataset()
scale, epochs = ("small", None) if data != "synthetic" else ("tiny", 1)
result = X.run_ablation("conv_vs_pool", scale=scale, seeds=(1, 2), dataset=data,
                        out_root="results-demo", epochs=epochs)
print(result.to_markdown())
