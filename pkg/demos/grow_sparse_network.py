"""Transfer a trained dense layer into a sparse convolutional network and grow it.

Run: python demos/grow_sparse_network.py
"""
# %% Imports and settings

from dynsurrogate.evaluate import evaluate
from dynsurrogate.nn import dense_model, init_params, param_count
from dynsurrogate.sampling import compute_norm_stats, dataspace, generate_dataset, normalize
from dynsurrogate.sparsify import build_sparse_template, grow, sparsity_mask, structured_mask, training_mse
from dynsurrogate.training import TrainConfig, train

n_train, fc_epochs, epochs = 2**13, 50, 20

space = dataspace(1, "displacement")
tr = generate_dataset(space, "train", 0, n_train)
va = generate_dataset(space, "val", 0, 1000)
te = generate_dataset(space, "test", 0, 1000)
xs, ys = compute_norm_stats(tr)
T, V = ((normalize(d.X, xs), normalize(d.Y, ys)) for d in (tr, va))

# %% Dense layer and its sparsity pattern
fc = init_params(dense_model(101), 0)
train(fc, T, V, TrainConfig(reg_weight=1e-3, learning_rate=3e-3, batch_size=64, epochs=fc_epochs))
_, rep = sparsity_mask(fc.layers[0].params["W"])
mask = structured_mask(rep.kind, 101, rep.band_width)
print(f"structure {rep.kind} (band {rep.band_width}): {int(mask.sum())} of {mask.size} weights kept")

# %% One conv block in front of the transferred sparse layer
cfg = TrainConfig(batch_size=256, learning_rate=1e-3, epochs=epochs)
model = build_sparse_template(101, 1, mask, fc.layers[0])
train(model, T, V, cfg)
print(f"n_l=1: {param_count(model)['trainable']} parameters, training MSE {training_mse(model, T):.4f}")

# %% Growth: new block trained alone, then everything together
model, steps = grow(model, 3, T, V, cfg)
for s in steps:
    print(f"n_l={s.n_l}: {s.loss_before:.4f} -> {s.loss_after:.4f} (ratio {s.ratio:.3f}), "
          f"new layers {s.new_layers}")
print(f"final: {param_count(model)['trainable']} parameters")
report = evaluate(model, te, xs, ys, case=1, name="grown")
print(f"test MSE {report.mse:.4f}, mean relative error {report.mean_rel_err_pct:.2f}%")
