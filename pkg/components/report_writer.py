import csv
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from utils.digest import to_jsonable
from utils.logger import log_action

CURVES_FILE = "curves.csv"
REPORT_FILE = "report.json"
THEORY_FILE = "theory.json"
COMPARISON_FILE = "comparison.json"
PLOT_FILE = "curves.svg"
NETWORK_ID = -1


def atomic_write(path, data) -> Path:
    """Write text or bytes through a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def json_text(data) -> str:
    return json.dumps(to_jsonable(data), indent=2, sort_keys=True, allow_nan=False) + "\n"


def curves_csv(agents: np.ndarray, network: np.ndarray) -> str:
    """iteration,agent_id,msd rows; agent_id -1 holds the network average."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["iteration", "agent_id", "msd"])
    for i in range(len(network)):
        for k, value in enumerate(agents[i]):
            writer.writerow([i, k, repr(float(value))])
        writer.writerow([i, NETWORK_ID, repr(float(network[i]))])
    return buffer.getvalue()


class ReportWriter:
    """Writes simulation artifacts into one output directory"""

    def __init__(self, outdir):
        self.outdir = Path(outdir)

    def write_json(self, name: str, data) -> Path:
        path = atomic_write(self.outdir / name, json_text(data))
        log_action("FILE_WRITTEN", str(path))
        return path

    def write_curves(self, curve) -> Path:
        path = atomic_write(self.outdir / CURVES_FILE, curves_csv(curve.agents, curve.network))
        log_action("FILE_WRITTEN", str(path))
        return path

    def write_plot(self, curve, title: Optional[str] = None) -> Path:
        """Log-scale learning curves as SVG; matplotlib is only needed here."""
        import matplotlib
        matplotlib.use("Agg")
        from matplotlib import pyplot as plt

        plt.rcParams["svg.hashsalt"] = "asyncnet"
        fig, ax = plt.subplots(figsize=(7, 4))
        iterations = np.arange(curve.iterations)
        if curve.agents.shape[1] > 1:
            for k in range(curve.agents.shape[1]):
                ax.semilogy(iterations, curve.agents[:, k], linewidth=0.6, alpha=0.6, label=f"agent {k}")
        ax.semilogy(iterations, curve.network, color="black", linewidth=1.2, label="network")
        ax.set_xlabel("iteration")
        ax.set_ylabel("MSD")
        if title:
            ax.set_title(title)
        ax.legend(fontsize="small")
        buffer = io.BytesIO()
        fig.savefig(buffer, format="svg", metadata={"Date": None})
        plt.close(fig)
        path = atomic_write(self.outdir / PLOT_FILE, buffer.getvalue())
        log_action("FILE_WRITTEN", str(path))
        return path

    def write_simulation(self, curve, report, plot: bool = False, title: Optional[str] = None) -> Dict[str, Path]:
        written = {"curves": self.write_curves(curve), "report": self.write_json(REPORT_FILE, report.to_dict())}
        if plot:
            written["plot"] = self.write_plot(curve, title)
        return written
