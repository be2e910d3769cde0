"""Rate-splitting multicast beamforming for tiled 360 video streaming."""

from .channel import ChannelState, SystemConfig, sample_channels
from .cccp import CccpSettings, multi_start, solve_cccp
from .formulation import DecisionVars, build_problem, check_feasibility
from .scene import SceneModel, fixture_grid, fixture_users, standard_ladder
from .utility import LogUtility, q_metric

__version__ = "0.1.0"
