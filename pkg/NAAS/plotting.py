import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import seaborn as sns  # noqa: E402
from mergedeep import merge  # noqa: E402

sns.set_style("darkgrid")

PHASE_COLOURS = {"u": "C0", "v": "C1", "as": "C2"}


def pca_basis(reference: np.ndarray, n_components: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """
    Mean and leading principal axes of ``reference``.

    Returns
    -------
    tuple
        The mean ``(d,)`` and the axes ``(d, n_components)``. For ``d < n_components`` the
        missing axes are zero.
    """
    reference = np.asarray(reference, dtype=np.float64)
    mean = reference.mean(axis=0)
    _, _, vt = np.linalg.svd(reference - mean, full_matrices=False)
    axes = np.zeros((reference.shape[1], n_components))
    k = min(n_components, vt.shape[0])
    axes[:, :k] = vt[:k].T
    # fix the sign of each axis
    signs = np.sign(axes[np.argmax(np.abs(axes), axis=0), np.arange(n_components)])
    signs[signs == 0] = 1.0
    return mean, axes * signs


def plot_samples(generated, reference, path, title: str = None, **kwargs):
    """
    Scatter of generated and reference samples projected onto the first two principal axes of
    the reference samples, written as SVG.

    Any keyword arguments are merged into the scatter style of the generated samples.
    """
    mean, axes = pca_basis(reference)
    reference_2d = (np.asarray(reference) - mean) @ axes
    generated_2d = (np.asarray(generated) - mean) @ axes

    fig, ax = plt.subplots(figsize=(7, 6))
    ax.scatter(
        reference_2d[:, 0], reference_2d[:, 1], s=6, alpha=0.3, color="C7", label="Reference"
    )
    generated_kwargs = dict(s=6, alpha=0.5, color="C3", label="Generated")
    merge(generated_kwargs, kwargs)
    ax.scatter(generated_2d[:, 0], generated_2d[:, 1], **generated_kwargs)
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    if title:
        ax.set_title(title)
    ax.legend(loc="upper right")
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_history(history: list, path):
    """
    Sinkhorn and MMD after each training phase, with the phases shaded by control.

    ``history`` holds one mapping per evaluation with at least ``phase``, ``sinkhorn`` and
    ``mmd``.
    """
    rows = [row for row in history if row.get("sinkhorn") is not None]
    fig, (ax_ot, ax_mmd) = plt.subplots(2, 1, figsize=(8, 6), sharex=True)
    index = np.arange(len(rows))
    for ax, key, label in ((ax_ot, "sinkhorn", "Sinkhorn"), (ax_mmd, "mmd", "MMD")):
        ax.plot(index, [row[key] for row in rows], color="k", marker="o", markersize=3)
        for i, row in enumerate(rows):
            ax.axvspan(i - 0.5, i + 0.5, color=PHASE_COLOURS.get(row["phase"], "C7"), alpha=0.15)
        ax.set_ylabel(label)
    if rows and all(row["sinkhorn"] > 0 for row in rows):
        ax_ot.set_yscale("log")
    ax_mmd.set_xlabel("Evaluation")
    handles = [
        plt.Rectangle((0, 0), 1, 1, color=colour, alpha=0.3, label=f"{phase}-phase")
        for phase, colour in PHASE_COLOURS.items()
        if any(row["phase"] == phase for row in rows)
    ]
    if handles:
        ax_ot.legend(handles=handles, loc="upper right")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
