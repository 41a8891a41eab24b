"""Neural routing for capacitated fleets with hard customer end-times."""
from .baselines import (Solution, brute_force_oracle, evaluate_solution, greedy_heuristic,
                        load_solution, save_solution, solve_with_policy)
from .env import EnvState, InstanceBatch, compute_urgency, feasible_actions, force_pomo_starts, reset, step
from .instance import GenerationConfig, Instance, generate_instance, load_instance, save_instance
from .policy import AttentionPolicy, PolicyConfig, rollout_episode
from .trainer import TrainConfig, compute_gae, load_checkpoint, ppo_update, save_checkpoint, train

__version__ = "0.1.0"
