import logging
from pathlib import Path
from typing import Iterable, List, Optional

import numpy as np
import pandas as pd

from hjb import FreeBoundary, ValueField, residual_check
from sde import McEstimate

FLOAT_FORMAT = '%.17g'


class ReportWriter:
    """Writes result tables into one output directory (comma-separated, LF, header row)."""

    def __init__(self, out_dir, prefix: str = ''):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.prefix = prefix
        self.logger = logging.getLogger(__name__)
        self.written: List[Path] = []

    def _write(self, frame: pd.DataFrame, name: str) -> Path:
        path = self.out_dir / f"{self.prefix}{name}"
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator='\n')
        self.written.append(path)
        self.logger.info(f"Wrote {path} ({len(frame)} rows)")
        return path

    def value_frame(self, field: ValueField, spec) -> pd.DataFrame:
        """One row per (x[, t], regime) with v, -h, the stop flag and the pointwise residual."""
        residual = residual_check(field, spec).pointwise
        x = field.grid.nodes
        frames = []
        for i in range(field.k):
            for ia, t in enumerate(field.age_nodes):
                frame = pd.DataFrame({'x': x})
                if not field.is_homogeneous:
                    frame['t'] = t
                frame['regime'] = i + 1
                frame['v'] = field.values[:, ia, i]
                frame['minus_h'] = field.minus_h[:, ia, i]
                frame['stop_flag'] = field.stop_flag[:, ia, i].astype(int)
                frame['residual'] = residual[:, ia, i]
                frames.append(frame)
        return pd.concat(frames, ignore_index=True)

    def write_value(self, field: ValueField, spec) -> Path:
        return self._write(self.value_frame(field, spec), 'v.csv')

    def write_boundary(self, boundary: FreeBoundary, homogeneous: bool) -> Path:
        columns = ['regime', 'boundary_x'] if homogeneous else ['regime', 'boundary_x', 't']
        rows = [{'regime': p.regime, 'boundary_x': p.x, 't': p.t} for p in boundary.points]
        frame = pd.DataFrame(rows, columns=['regime', 'boundary_x', 't'])[columns]
        return self._write(frame, 'boundary.csv')

    def write_estimate(self, estimate: McEstimate, x0: float, t0: float, i0: int, policy: str) -> Path:
        row = {'x0': x0, 't0': t0, 'i0': i0, 'policy': policy}
        row.update(estimate.as_row())
        return self._write(pd.DataFrame([row]), 'mc.csv')

    def write_report(self, rows: Iterable) -> Path:
        frame = pd.DataFrame([row.as_row() for row in rows],
                             columns=['case', 'check', 'point', 'expected', 'got', 'tolerance', 'pass'])
        frame['pass'] = frame['pass'].map({True: 'PASS', False: 'FAIL'})
        return self._write(frame, 'report.csv')

    def write_plot_data(self, field: ValueField, boundary: Optional[FreeBoundary] = None) -> List[Path]:
        """Tidy long tables: one observation per row, ready for external plotting."""
        x = field.grid.nodes
        n_x, n_ages, k = field.values.shape
        frame = pd.DataFrame({
            'x': np.tile(np.repeat(x, n_ages), k),
            't': np.tile(np.tile(field.age_nodes, n_x), k),
            'regime': np.repeat(np.arange(1, k + 1), n_x * n_ages),
        })
        # values are (x, age, regime); flatten regime-major to match the index columns
        for name, data in (('v', field.values), ('minus_h', field.minus_h), ('gap', field.gap)):
            frame[name] = np.transpose(data, (2, 0, 1)).reshape(-1)
        long = frame.melt(id_vars=['x', 't', 'regime'], var_name='series', value_name='value')
        paths = [self._write(long, 'plot_value.csv')]
        if boundary is not None:
            points = pd.DataFrame([{'regime': p.regime, 't': 0.0 if p.t is None else p.t, 'x': p.x, 'side': p.side}
                                   for p in boundary.points], columns=['regime', 't', 'x', 'side'])
            paths.append(self._write(points, 'plot_boundary.csv'))
        return paths

    def write_report_plot_data(self, rows: Iterable) -> Path:
        frame = pd.DataFrame([row.as_row() for row in rows])
        if frame.empty:
            return self._write(pd.DataFrame(columns=['case', 'check', 'point', 'quantity', 'value']), 'plot_report.csv')
        long = frame.melt(id_vars=['case', 'check', 'point'], value_vars=['expected', 'got', 'tolerance'],
                          var_name='quantity', value_name='value')
        return self._write(long, 'plot_report.csv')


def summarize_report(rows: Iterable) -> pd.DataFrame:
    """Checks per (case, check) with their failure counts."""
    frame = pd.DataFrame([row.as_row() for row in rows])
    if frame.empty:
        return pd.DataFrame(columns=['case', 'check', 'checks', 'failed'])
    frame['failed'] = ~frame['pass'].astype(bool)
    summary = frame.groupby(['case', 'check'], sort=False).agg(checks=('pass', 'size'), failed=('failed', 'sum'))
    return summary.reset_index()
