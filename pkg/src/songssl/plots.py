import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def reconstruction_triptych(clean, masked, pred, path):
    fig, axes = plt.subplots(3, 1, figsize=(10, 7), sharex=True)
    for ax, img, title in zip(axes, (clean, masked, pred), ("input", "masked view", "prediction")):
        ax.imshow(np.asarray(img).T, origin="lower", aspect="auto", vmin=0, vmax=1, cmap="magma")
        ax.set_title(title)
        ax.set_ylabel("bin")
    axes[-1].set_xlabel("frame")
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)


def osc_loss_curve(history, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = history.column("epoch")
    ax.plot(epochs, history.column("l_ce"), label="swapped CE")
    ax.plot(epochs, history.column("l_gini"), label="Gini impurity")
    ax.set_xlabel("epoch")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)


def duration_histograms(true_d, pred_d, path, title=""):
    fig, ax = plt.subplots(figsize=(6, 4))
    bins = np.linspace(0, max(np.max(true_d, initial=1), np.max(pred_d, initial=1)), 40)
    ax.hist(true_d, bins=bins, alpha=0.5, label="true")
    ax.hist(pred_d, bins=bins, alpha=0.5, label="predicted")
    ax.set_xlabel("duration (ms)")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)


def transition_heatmap(tm, path):
    fig, ax = plt.subplots(figsize=(5, 4.5))
    im = ax.imshow(tm.probabilities, vmin=0, vmax=1, cmap="viridis")
    ax.set_xticks(range(len(tm.labels)), tm.labels)
    ax.set_yticks(range(len(tm.labels)), tm.labels)
    ax.set_xlabel("to")
    ax.set_ylabel("from")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)
