"""Graph-sampling serving toolkit: PSGS and FAP metrics, feature placement,
hybrid CPU/GPU routing and a discrete-event serving model."""
from .graph import Graph, TransitionView, from_edges, load_graph, transition_view
from .metrics import (FapTable, PsgsTable, compute_access_prob_ie, compute_fap, compute_psgs,
                      seed_distribution)
from .placement import (ClusterTopology, FeatureLookupTable, PlacementPlan, build_lookup_table,
                        fetch_cost, plan_placement, plan_reads)
from .sampler import SamplingConfig, batch_sample, sample_khop
from .scheduler import (CalibrationCurve, CrossPoints, calibrate, cross_points,
                        optimize_microbatch, route_batch)
from .sim import DeviceModel, SimReport, WorkloadSpec, make_policy, run_sim, sweep

__version__ = "0.1.0"
