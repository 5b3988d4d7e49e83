"""Stochastic calculus of variations on simulated diffusion ensembles.

The package estimates mean forward/backward derivatives of diffusion paths
and their complex combination, evaluates the stochastic action functional
and its directional derivatives, checks stochastic Euler-Lagrange residuals
and the zero-noise embedding consistency, and tracks Noether-type conserved
quantities under affine symmetry groups.
"""

from .diffusion import (DiffusionModel, InitialLaw, PathEnsemble, TimeGrid,
                        affine_model, deterministic_ensemble, ensemble_from_binary,
                        ensemble_to_binary, ensemble_to_csv, gaussian_start,
                        point_start, simulate)
from .density import (DiracDensityModel, GaussianDensityModel, KdeDensityModel,
                      brownian_density, density_at, kde_fit, ou_stationary_density,
                      silverman_bandwidth)
from .exceptions import (CapabilityError, EstimationError, InputError, ScenarioError,
                         SimulationError, StovarError)
from .lagrangian import (LagrangianSpec, Potential, QuadraticForm, check_admissible,
                         central_power_potential, eval_lagrangian, free_potential,
                         harmonic_potential, partials, tabulated_potential)
from .nelson import (DerivativeField, EstimatorConfig, SpaceTimeFunction,
                     analytic_complex_derivative, backward_derivative, c1_norm,
                     complex_derivative, complex_drift_function,
                     derivative_of_function, deterministic_complex_derivative,
                     deterministic_second_derivative, field_to_csv,
                     forward_derivative, l2_modulus, product_rule_check,
                     second_derivative)
from .noether import (ConservedQuantitySeries, ConstancyVerdict, OneParameterGroup,
                      affine_group, apply_group, check_group_law, commutation_check,
                      conserved_quantity, constancy_test, generator_consistency,
                      invariance_check, rotation_group, scaling_group,
                      translation_group)
from .runner import RunReport, run_scenario
from .scenario import (Scenario, bundled_scenarios, load_scenario, parse_scenario,
                       registries_text)
from .variation import (ActionEstimate, ClassicalTrajectory, CoherenceReport,
                        ELResidualField, VariationProcess, action, bump_variation,
                        certify_variation, classical_el_residual, classical_el_solve,
                        coherence_check, compare_embedded_residuals,
                        constant_variation, directional_derivative_fd,
                        directional_derivative_formula, el_residual,
                        linear_variation, sine_variation, variation_from_samples)

__version__ = "0.1.0"
