"""Desk-scale sponsored-search ranking laboratory.

A numpy library for experimenting with parameterized ad ranking under
GSP pricing: synthetic replay logs, isotonic response calibration, a
simulated auction environment, an asynchronous actor-critic learner
built on a from-scratch neural core, evolution-strategy online
fine-tuning, and a brute-force parameter-search oracle with business
metrics.
"""
from .auction import (ACTION_DIM, DEFAULT_BOUNDS, ActionBounds, AuctionOutcome,
                      baseline_action, baseline_score, pack_records, rank_score,
                      run_auction)
from .calibration import (CalibrationMap, IdentityCalibrator, PartitionedCalibrator,
                          fit_from_responses, fit_isotonic, fit_partitioned, pav)
from .env import Calibrators, EnvConfig, batch_rewards, rollout, step
from .es import BinResult, EsConfig, es_update, evaluate_bin, perturb, route_traffic, run_es
from .evaluate import (GridSpec, MetricsReport, OracleResult, evaluate_policy,
                       grid_search, policy_oracle_error, tune_baseline)
from .nets import (ActorNet, AdamOptimizer, CriticNet, ParameterSet, SgdOptimizer,
                   StateSpec, sgd_apply, soft_update)
from .replay import (AdCandidate, AuctionRecord, GeneratorConfig, SearchContext,
                     TransitionTuple, generate_log, read_log, sample_user_response,
                     write_log)
from .trainer import (PRESETS, ParameterServer, TrainConfig, TransitionStore,
                      actor_step, critic_step, explore, train)

__version__ = "0.1.0"
