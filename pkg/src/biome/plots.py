"""Deterministic figure rendering (fixed size, colormap and metadata)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FIGSIZE = (6.0, 4.0)
DPI = 100
CMAP = "magma"

plt.rcParams["svg.hashsalt"] = "biome"


def _save(fig, path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".svg":
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    else:
        fig.savefig(path, format="png", dpi=DPI, metadata={"Software": None})
    plt.close(fig)


def _image(values, xlabel, ylabel, title, cbar):
    fig, ax = plt.subplots(figsize=FIGSIZE)
    im = ax.imshow(np.asarray(values), origin="lower", aspect="auto", cmap=CMAP, interpolation="nearest")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.colorbar(im, ax=ax, label=cbar)
    fig.tight_layout()
    return fig


def spectrogram_figure(mel):
    return _image(mel, "time (frames)", "mel bin", "log-mel spectrogram", "log power")


def modspec_figure(modspec):
    # modulation frequency on x, acoustic frequency on y
    return _image(np.log1p(modspec), "modulation frequency f_mod (bin)", "acoustic frequency f (bin)",
                  "modulation spectrum", "log1p magnitude")


def saliency_figure(saliency):
    return _image(saliency, "time (frames)", "mel bin", "saliency", "|gradient| (max-normalized)")


def render_spectrogram(mel, path):
    _save(spectrogram_figure(mel), path)


def render_modspec(modspec, path):
    _save(modspec_figure(modspec), path)


def render_saliency(saliency, path):
    _save(saliency_figure(saliency), path)


def render_projection(points, labels, path):
    fig, ax = plt.subplots(figsize=FIGSIZE)
    labels = np.asarray(labels)
    for lab in np.unique(labels):
        m = labels == lab
        ax.scatter(points[m, 0], points[m, 1], s=12, label=str(lab))
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.legend(title="label")
    fig.tight_layout()
    _save(fig, path)
