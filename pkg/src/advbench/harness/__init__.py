"""Campaign configuration, execution, reporting and artifact verification."""

from advbench.harness.config import PRESETS, CampaignConfig, attack_from_spec, load_config
from advbench.harness.report import TABLE_COLUMNS, emit_language_figure_data, emit_table, load_summary
from advbench.harness.runner import aggregate, run_campaign
from advbench.harness.verify import verify_artifacts

__all__ = [
    "PRESETS",
    "TABLE_COLUMNS",
    "CampaignConfig",
    "aggregate",
    "attack_from_spec",
    "emit_language_figure_data",
    "emit_table",
    "load_config",
    "load_summary",
    "run_campaign",
    "verify_artifacts",
]
