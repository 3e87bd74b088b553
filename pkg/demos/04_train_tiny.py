"""Train a narrowed design1_conv on generated images, then reload it from disk.

Run: python3 demos/04_train_tiny.py   (about ten seconds)
"""
import tempfile

from complab import experiments as X
from complab.data import preprocess_eval_batch

out = tempfile.mkdtemp(prefix="complab-")
run = X.parse_runfile(f"""
[run]
design = design1_conv
scale = tiny
dataset = synthetic
output = {out}

[train]
seed = 7
epochs = 4
batch_size = 64
policy = poly
lambda0 = 0.05
""")
mlog, summary = X.execute(run)
print(mlog.to_csv())
print(f"{summary['params_K']}K params, final test accuracy {summary['final_test_acc']:.3f}, files in {out}")

model, loaded = X.load_trained(out)
_, test = X.load_data(loaded)
acc = (model.forward(preprocess_eval_batch(test)).argmax(1) == test.labels).mean()
print(f"reloaded weights score {acc:.3f} on the same test images")
