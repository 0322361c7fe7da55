from .barren_plateau import barren_plateau_command
from .bounds import bounds_command
from .dp_audit import dp_audit_command
from .run_fl import build_federation, run_fl_command
from .variance_check import variance_check_command

__all__ = [
    'barren_plateau_command',
    'bounds_command',
    'build_federation',
    'dp_audit_command',
    'run_fl_command',
    'variance_check_command',
]
