from app.cli.commands import (
    cmd_regions,
    cmd_simulate,
    cmd_solve,
    cmd_sweep,
    cmd_verify,
    compare_sensing_cost
)

__all__ = ["cmd_solve", "cmd_simulate", "cmd_sweep", "cmd_verify", "cmd_regions", "compare_sensing_cost"]
