import json

import numpy as np
import pytest
from scipy.linalg import expm

from thermoforge.config import parse_notation
from thermoforge.enumeration import enumerate_single_split, enumerate_trees
from thermoforge.thermal import (
    ModelConstructionError,
    PhysicsParams,
    PiecewiseLinearFlows,
    assemble,
    build_model,
    build_physics_graph,
    simulate,
)

from test_config import random_feasible_flows


def node_balance_rhs(physics, temps, x, loads_w, pump=None, sink=None):
    """Independent oracle: per-node power balance summed edge by edge."""
    params = physics.params
    pump = params.pump_flow if pump is None else pump
    sink = params.sink_flow if sink is None else sink
    n = physics.n_states
    te = np.append(temps, params.t_sink)
    power = np.zeros(n)
    for e in physics.edges:
        if e.kind == "convection":
            q = e.ha * (te[e.head] - te[e.tail])
            power[e.tail] += q
            power[e.head] -= q
        else:
            mdot = e.pump_coef * pump + float(np.dot(e.x_coefs, x)) + e.sink_coef * sink
            power[e.head] += mdot * params.cp_fluid * (te[e.tail] - te[e.head])
    labels = list(physics.config.labels)
    for lab, widx in physics.heat_load_map.items():
        power[widx] += loads_w[labels.index(lab)]
    caps = np.array([nd.capacitance for nd in physics.nodes[:n]])
    return power / caps


def build_random_case(rng):
    """Random small configuration with loads, temps, and feasible flows."""
    n = int(rng.integers(1, 7))
    pops = enumerate_single_split(n) if rng.random() < 0.5 else enumerate_trees(
        n, complete=True)
    graph = pops[int(rng.integers(len(pops)))]
    loads = {lab: float(rng.uniform(0, 12000)) for lab in graph.labels}
    model = build_model(graph, loads)
    temps = rng.uniform(5.0, 80.0, model.n_states)
    x = random_feasible_flows(model.physics.flow_map, rng)
    return model, temps, x, np.array([loads[lab] for lab in graph.labels])


class TestParams:
    def test_published_defaults(self):
        p = PhysicsParams()
        assert p.llhx_wall_mass == 1.2
        assert p.cphx_wall_mass == 1.15
        assert p.tank_fluid_mass == 2.01
        assert p.t_sink == 15.0
        assert p.sink_flow == 0.2
        assert p.pump_flow == 0.4

    def test_json_roundtrip(self):
        p = PhysicsParams(ha_cphx=750.0)
        assert PhysicsParams.from_json(p.to_json()) == p

    def test_override_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            PhysicsParams().with_overrides({"hA": 1.0})

    def test_positive_validation(self):
        with pytest.raises(ValueError):
            PhysicsParams(cp_fluid=-1.0)


class TestPhysicsGraph:
    def test_single_device_structure(self):
        pg = build_physics_graph(parse_notation("0 (1)"), {1: 1000.0})
        kinds = [n.kind for n in pg.nodes]
        assert kinds == ["tank_fluid", "cphx_fluid", "cphx_wall", "llhx_primary",
                         "llhx_wall", "llhx_secondary", "sink_boundary"]
        adv = [(e.tail, e.head) for e in pg.advection_edges()]
        i = pg.node_index
        assert adv == [
            (i("tank"), i("f1")), (i("f1"), i("llhx_p")),
            (i("llhx_p"), i("tank")), (i("sink"), i("llhx_s")),
        ]
        conv = {frozenset((e.tail, e.head)) for e in pg.convection_edges()}
        assert conv == {
            frozenset((i("w1"), i("f1"))),
            frozenset((i("llhx_w"), i("llhx_p"))),
            frozenset((i("llhx_w"), i("llhx_s"))),
        }

    def test_node_and_edge_counts(self):
        pg = build_physics_graph(parse_notation("0 (1,2) (3)"), {1: 1.0, 2: 1.0, 3: 1.0})
        assert pg.n_states == 10  # 2N + 4 internal
        assert len(pg.nodes) == 11  # plus the sink boundary
        adv = pg.advection_edges()
        assert len(adv) == 3 + 2 + 1 + 1  # branches + tails + return + sink pair

    def test_scales_to_eighteen_devices(self):
        n = 18
        edges = [(0, 1)] + [(k - 1, k) for k in range(2, n + 1)]
        pg = build_physics_graph(parse_notation("0 (" + ",".join(
            str(k) for k in range(1, n + 1)) + ")"), {k: 1.0 for k in range(1, n + 1)})
        assert pg.n_states == 2 * n + 4
        assert len(pg.nodes) == 2 * n + 4 + 1

    def test_missing_load_names_label(self):
        with pytest.raises(ModelConstructionError, match=r"\[3\]"):
            build_physics_graph(parse_notation("0 (1,2) (3)"), {1: 1.0, 2: 1.0})

    def test_total_flow_into_llhx(self):
        rng = np.random.default_rng(0)
        g = parse_notation("0 (1 (2) (3)) (4,5)")
        pg = build_physics_graph(g, {k: 1.0 for k in range(1, 6)})
        x = random_feasible_flows(pg.flow_map, rng)
        i_llhx = pg.node_index("llhx_p")
        total = sum(
            e.pump_coef * pg.params.pump_flow + float(np.dot(e.x_coefs, x))
            for e in pg.advection_edges() if e.head == i_llhx
        )
        assert total == pytest.approx(pg.params.pump_flow, abs=1e-12)


class TestAssemble:
    def test_capacitances_positive_diagonal(self):
        m = build_model(parse_notation("0 (1,2)"), {1: 1.0, 2: 1.0})
        assert np.all(m.c > 0)

    def test_convection_pairwise_power_conservation(self):
        # C_i * A_ij == C_j * A_ji for the convection part (antisymmetric powers)
        m = build_model(parse_notation("0 (1) (2)"), {1: 1.0, 2: 1.0})
        a_red = m.a[:, :-1]
        power = m.c[:, None] * a_red
        np.testing.assert_allclose(power, power.T, atol=1e-9)

    def test_zero_capacitance_rejected(self):
        pg = build_physics_graph(parse_notation("0 (1)"), {1: 1.0})
        bad = pg.nodes[0].__class__("tank", "tank_fluid", 0.0)
        broken = pg.__class__(
            config=pg.config, flow_map=pg.flow_map, params=pg.params,
            nodes=(bad,) + pg.nodes[1:], edges=pg.edges,
            heat_load_map=pg.heat_load_map, loads_w=pg.loads_w,
            sink_index=pg.sink_index,
        )
        with pytest.raises(ModelConstructionError):
            assemble(broken)


class TestRhs:
    def test_global_equilibrium_is_zero(self):
        m = build_model(parse_notation("0 (1,2) (3)"), {k: 0.0 for k in (1, 2, 3)})
        t = np.full(m.n_states, m.t_sink)
        r = m.rhs(t, flows=np.zeros(m.n_flows), loads_w=np.zeros(3),
                  pump_flow=0.0, sink_flow=0.0)
        assert np.abs(r).max() < 1e-12

    def test_uniform_temperature_kills_advection(self):
        m = build_model(parse_notation("0 (1)"), {1: 0.0})
        t = np.full(m.n_states, m.t_sink)
        r = m.rhs(t, flows=np.zeros(0), loads_w=np.zeros(1))
        assert np.abs(r).max() < 1e-12

    def test_hot_fluid_advects_negative(self):
        m = build_model(parse_notation("0 (1)"), {1: 0.0})
        t = np.full(m.n_states, 15.0)
        i_f1 = m.physics.node_index("f1")
        t[i_f1] = 30.0
        r = m.rhs(t, flows=np.zeros(0), loads_w=np.zeros(1), sink_flow=0.0)
        assert r[i_f1] < 0.0

    def test_doubling_ha_doubles_rhs_without_flows(self):
        g = parse_notation("0 (1,2)")
        loads = {1: 0.0, 2: 0.0}
        m1 = build_model(g, loads)
        m2 = build_model(g, loads, PhysicsParams(
            ha_cphx=1000.0, ha_llhx_primary=2000.0, ha_llhx_secondary=2000.0))
        rng = np.random.default_rng(2)
        t = rng.uniform(10, 50, m1.n_states)
        r1 = m1.rhs(t, flows=np.zeros(0), loads_w=np.zeros(2),
                    pump_flow=0.0, sink_flow=0.0)
        r2 = m2.rhs(t, flows=np.zeros(0), loads_w=np.zeros(2),
                    pump_flow=0.0, sink_flow=0.0)
        np.testing.assert_allclose(r2, 2.0 * r1, rtol=1e-12)

    def test_rejects_nonfinite(self):
        m = build_model(parse_notation("0 (1)"), {1: 1.0})
        t = np.full(m.n_states, 20.0)
        t[0] = np.nan
        with pytest.raises(ValueError):
            m.rhs(t, flows=np.zeros(0))

    def test_matrix_vs_node_balance_200_random(self):
        rng = np.random.default_rng(1234)
        for _ in range(200):
            model, temps, x, loads = build_random_case(rng)
            r_matrix = model.rhs(temps, x, loads)
            r_direct = node_balance_rhs(model.physics, temps, x, loads)
            scale = max(np.abs(r_direct).max(), 1e-30)
            assert np.abs(r_matrix - r_direct).max() <= 1e-12 * scale

    def test_advection_power_telescopes(self):
        rng = np.random.default_rng(99)
        for _ in range(50):
            model, temps, x, _ = build_random_case(rng)
            pg = model.physics
            te = np.append(temps, model.t_sink)
            total = 0.0
            for e in pg.advection_edges():
                if e.kind != "advection":
                    continue
                mdot = e.pump_coef * pg.params.pump_flow + float(np.dot(e.x_coefs, x))
                total += mdot * pg.params.cp_fluid * (te[e.tail] - te[e.head])
            assert abs(total) <= 1e-9

    def test_global_energy_audit(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            model, temps, x, loads = build_random_case(rng)
            r = model.rhs(temps, x, loads)
            i_ls = model.physics.node_index("llhx_s")
            expected = loads.sum() + model.params.sink_flow * model.params.cp_fluid * (
                model.t_sink - temps[i_ls])
            assert abs(float(model.c @ r) - expected) <= 1e-9


class TestSimulate:
    def test_convection_only_walls_decay(self):
        m = build_model(parse_notation("0 (1)"), {1: 0.0})
        t0 = m.initial_state(t_wall=20.0, t_fluid=15.0, t_loop=15.0)
        traj = simulate(m, t0, flows=np.zeros(0), loads_w=np.zeros(1),
                        t_end=30.0, tol=1e-9, pump_flow=0.0, sink_flow=0.0)
        i_w = m.physics.node_index("w1")
        i_f = m.physics.node_index("f1")
        walls = traj.states[:, i_w]
        assert np.all(np.diff(walls) <= 1e-7)  # slack for dense-output wiggle
        assert walls[-1] < walls[0]
        # two-body exchange: wall approaches the fluid temperature
        assert abs(walls[-1] - traj.states[-1, i_f]) < 0.05

    def test_lti_vs_matrix_exponential(self):
        m = build_model(parse_notation("0 (1)"), {1: 5000.0})
        t0 = m.initial_state()
        j, k = m.lti_parts(np.zeros(0))
        n = m.n_states
        aug = np.zeros((n + 1, n + 1))
        aug[:n, :n] = j
        aug[:n, n] = k
        for t_star in (5.0, 20.0):
            e = expm(aug * t_star)
            exact = e[:n, :n] @ t0 + e[:n, n]
            traj = simulate(m, t0, flows=np.zeros(0), t_end=t_star, tol=1e-11,
                            dense_points=3)
            rel = np.abs(traj.states[-1] - exact).max() / np.abs(exact).max()
            assert rel <= 1e-8

    def test_event_detection(self):
        m = build_model(parse_notation("0 (1)"), {1: 8000.0})
        traj = simulate(m, m.initial_state(), flows=np.zeros(0), t_end=500.0,
                        tol=1e-9, t_bound=45.0)
        assert traj.event_time is not None
        assert 0.0 < traj.event_time < 500.0
        assert traj.states[-1].max() == pytest.approx(45.0, abs=1e-6)

    def test_no_event_without_bound_crossing(self):
        m = build_model(parse_notation("0 (1)"), {1: 100.0})
        traj = simulate(m, m.initial_state(), flows=np.zeros(0), t_end=50.0,
                        tol=1e-8, t_bound=45.0)
        assert traj.event_time is None

    def test_fluid_temperatures_bounded_below(self):
        m = build_model(parse_notation("0 (1) (2)"), {1: 4000.0, 2: 2000.0})
        t0 = m.initial_state()
        traj = simulate(m, t0, flows=np.array([0.2]), t_end=60.0, tol=1e-9)
        floor = min(m.t_sink, t0.min())
        assert traj.states.min() >= floor - 1e-6

    def test_piecewise_linear_schedule(self):
        m = build_model(parse_notation("0 (1) (2)"), {1: 4000.0, 2: 2000.0})
        sched = PiecewiseLinearFlows(np.array([0.0, 10.0, 20.0]),
                                     np.array([[0.1], [0.3], [0.2]]))
        traj = simulate(m, m.initial_state(), flows=sched, t_end=20.0, tol=1e-8)
        assert np.all(np.isfinite(traj.states))

    def test_initial_state_layout(self):
        m = build_model(parse_notation("0 (1,2)"), {1: 1.0, 2: 1.0})
        t0 = m.initial_state(t_wall=21.0, t_fluid=19.0, t_loop=16.0)
        names = dict(zip(m.state_names, t0))
        assert names["w1"] == 21.0 and names["f2"] == 19.0
        assert names["tank"] == 16.0 and names["llhx_w"] == 16.0

    def test_trajectory_csv_with_edge_flows(self, tmp_path):
        m = build_model(parse_notation("0 (1) (2)"), {1: 4000.0, 2: 2000.0})
        traj = simulate(m, m.initial_state(), flows=np.array([0.25]),
                        t_end=5.0, tol=1e-8, dense_points=11)
        path = tmp_path / "traj.csv"
        traj.write_csv(path, model=m, flows=np.array([0.25]))
        lines = path.read_text().splitlines()
        header = lines[0].split(",")
        assert header[0] == "t_s"
        assert "T_tank" in header and "mdot_tank_to_f1" in header
        assert len(lines) == 12
        row = lines[1].split(",")
        assert row[header.index("mdot_tank_to_f1")] == "0.25000000"
        # dependent branch carries the remainder of the pump flow
        assert row[header.index("mdot_tank_to_f2")] == "0.15000000"
