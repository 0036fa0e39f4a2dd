"""End-to-end run shared by the CLI and the tests."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

from flexact import activation, fas, metrics, netmodel, powerflow, sensitivity


@dataclass
class Pipeline:
    settings: object

    @cached_property
    def model(self):
        return netmodel.load_network(self.settings.network, s_base_kva=self.settings.s_base_kva)

    @cached_property
    def profiles(self):
        return netmodel.load_profiles(self.settings.profiles, self.model,
                                      step_minutes=self.settings.step_minutes)

    @property
    def limits(self):
        return self.settings.limits

    @cached_property
    def net_load(self):
        return self.profiles.net_load(self.model)

    @cached_property
    def base_state(self):
        return powerflow.solve_horizon(self.model, self.net_load)

    @cached_property
    def _sens(self):
        ref = sensitivity.reference_load(self.net_load, self.settings.reference)
        return sensitivity.compute_all(self.model, ref, self.settings.levels,
                                       reference=str(self.settings.reference))

    @property
    def nvs(self):
        return self._sens[0]

    @property
    def thermal(self):
        return self._sens[1]

    @cached_property
    def fas(self):
        s = self.settings
        return fas.build_fas(self.model, self.base_state, self.nvs, self.limits,
                             kappa_v=s.kappa_v, kappa_t=s.kappa_t, thermal_mirror=s.thermal_mirror,
                             imb_sign_normalized=s.imb_sign_normalized,
                             weighted_current=s.weighted_current)

    @cached_property
    def raw_flex(self):
        return netmodel.flex_limits(self.model, self.profiles.T)

    @cached_property
    def gated(self):
        return activation.gate_limits(self.fas, self.raw_flex)

    def activation_settings(self):
        s = self.settings
        return activation.ActivationSettings(trust=s.trust, max_iter=s.max_iter, backend=s.backend,
                                             hierarchy=s.hierarchy,
                                             refresh_sensitivity=s.refresh_sensitivity)

    def activate(self, gv=None):
        gv = self.settings.gv if gv is None else gv
        return activation.solve_horizon(self.model, self.profiles, self.fas, self.gated, self.nvs,
                                        self.thermal, self.limits, gv,
                                        settings=self.activation_settings())

    def pareto(self, grid=None):
        grid = self.settings.grid if grid is None else grid
        return metrics.pareto_sweep(self.model, self.profiles, self.fas, self.gated, self.nvs,
                                    self.thermal, self.limits, grid,
                                    settings=self.activation_settings())
