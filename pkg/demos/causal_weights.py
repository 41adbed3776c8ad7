"""A single linear layer learns a causal (lower-triangular) load-to-response map.

Run: python demos/causal_weights.py
"""
# %% Imports and settings
import time

import numpy as np

from dynsurrogate.evaluate import evaluate, mse_metric
from dynsurrogate.nn import dense_model, init_params
from dynsurrogate.sampling import compute_norm_stats, dataspace, generate_dataset, normalize
from dynsurrogate.sparsify import sparsity_mask
from dynsurrogate.training import TrainConfig, train

n_train, epochs = 2**13, 50

# %% Data
# Zero initial conditions make the response at step i depend only on loads
# at steps 0..i, so the exact linear map is lower triangular.
space = dataspace(1, "displacement")
tr = generate_dataset(space, "train", 0, n_train)
va = generate_dataset(space, "val", 0, 1000)
te = generate_dataset(space, "test", 0, 1000)
xs, ys = compute_norm_stats(tr)
norm = lambda ds: (normalize(ds.X, xs), normalize(ds.Y, ys))

# %% Training
model = init_params(dense_model(101), 0)
cfg = TrainConfig(reg_weight=1e-3, learning_rate=3e-3, batch_size=64, epochs=epochs, seed=0)
t0 = time.perf_counter()
hist = train(model, norm(tr), norm(va), cfg)
print(f"trained {epochs} epochs in {time.perf_counter() - t0:.1f} s; "
      f"train {hist.train_loss[-1]:.4f}, val {hist.val_loss[-1]:.4f}")
report = evaluate(model, te, xs, ys, case=1, name="fc")
print(f"test MSE {report.mse:.4f}, mean relative error {report.mean_rel_err_pct:.2f}%")

# %% Least-squares reference
# The same affine map fitted exactly. Band-limited loads leave the data
# matrix nearly rank deficient, so the exact fit interpolates to round-off.
X, Y = norm(tr)
A = np.hstack([X, np.ones((len(X), 1))])
coef, *_ = np.linalg.lstsq(A, Y, rcond=None)
Xt, Yt = norm(te)
ls = np.mean(np.sum((np.hstack([Xt, np.ones((len(Xt), 1))]) @ coef - Yt) ** 2, axis=1))
print(f"least-squares test MSE {ls:.3e}; trained model {mse_metric(model, (Xt, Yt)):.3e}")

# %% Where the large weights are
mask, rep = sparsity_mask(model.layers[0].params["W"])
print(f"{rep.nnz} weights above 5% of max |W|; {100 * rep.lower_fraction:.1f}% on or below the diagonal")
print(f"fitted structure: {rep.kind}, band width {rep.band_width}")
rows = np.linspace(0, 100, 11).astype(int)
for i in rows:
    line = "".join("#" if mask[i, j] else ("." if j <= i else " ") for j in range(0, 101, 2))
    print(f"row {i:3d} {line}")
