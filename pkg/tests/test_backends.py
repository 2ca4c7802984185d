"""Strategy backends and the external wire protocol."""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from floodloop import backends as b
from floodloop import policy as p
from floodloop.errors import BackendUnavailable
from floodloop.knowledge import FeedbackNote, build_prompt
from floodloop.state import StateSummary


def summary_with(n_regions=4, flood=None, depth=None, blocked=None, congestion=None):
    flood = flood or [0.5] * n_regions
    congestion = congestion or [0.5] * n_regions
    depth = depth or [0.0] * n_regions
    blocked = blocked or [0] * n_regions
    return StateSummary(
        step=0,
        scenario_kind="extreme",
        intensity=0.5,
        region_flood=tuple(flood),
        region_congestion=tuple(congestion),
        region_max_depth=tuple(depth),
        region_blocked_roads=tuple(blocked),
        blocking_depth=0.3,
        flooded_regions=tuple(i for i, v in enumerate(flood) if v > 0.7),
        congested_regions=tuple(i for i, v in enumerate(congestion) if v > 0.7),
        targeted_regions=(),
        spawned=10,
        arrived=2,
        cancelled=0,
        enroute=8,
    )


def prompt_for(summary, feedback=None):
    return build_prompt(summary.text(), None, [], "dispatch", feedback, summary=summary)


# --- empty ---------------------------------------------------------------------

def test_empty_backend_noop_everywhere():
    prompt = prompt_for(summary_with())
    proposal = b.EmptyBackend().propose(prompt, 4, 1.2, 0)
    assert p.entropy_of(proposal.distribution.probs) == 0.0
    sampled = p.sample_per_region(proposal.distribution, 4, seed=0, cycle=0)
    assert all(a.verb is p.Verb.NOOP for a in sampled.values())


# --- ruled ---------------------------------------------------------------------

def test_ruled_concentrates_on_hot_region():
    flood = [0.2, 0.2, 0.95, 0.2]
    depth = [0.0, 0.0, 0.31, 0.0]
    prompt = prompt_for(summary_with(flood=flood, depth=depth))
    proposal = b.RuledBackend().propose(prompt, 4, 1.2, 0)
    mass = {}
    for action, prob in zip(proposal.distribution.support, proposal.distribution.probs):
        mass[(action.verb, action.region)] = prob
    hot = mass.get((p.Verb.REROUTE_REGION, 2), 0.0) + mass.get((p.Verb.CLOSE_ROAD, 2), 0.0)
    assert hot > 0.5
    for region in (0, 1, 3):
        assert mass.get((p.Verb.REROUTE_REGION, region), 0.0) == 0.0
        assert mass.get((p.Verb.CLOSE_ROAD, region), 0.0) == 0.0


def test_ruled_rule_table_oracle_preventive():
    # independent recomputation of the score table: hot region, wet but not
    # yet blocked -> close/reroute from the hot-spot rule plus light
    # preventive pumping
    flood = [0.2, 0.9, 0.2, 0.2]
    depth = [0.0, 0.30, 0.0, 0.0]
    summary = summary_with(flood=flood, depth=depth)
    proposal = b.RuledBackend().propose(prompt_for(summary), 4, 1.2, 0)
    wetness = min(1.0, 0.30 / 0.3)
    expected = {
        (p.Verb.NOOP, 0): 0.5,
        (p.Verb.CLOSE_ROAD, 1): 0.4 * 0.9 * wetness,
        (p.Verb.REROUTE_REGION, 1): 0.9 * wetness,
        (p.Verb.DISPATCH_RELIEF, 1): 0.5,
    }
    total = sum(expected.values())
    got = {(a.verb, a.region): prob for a, prob in zip(proposal.distribution.support, proposal.distribution.probs)}
    assert set(got) == set(expected)
    for key, weight in expected.items():
        assert got[key] == pytest.approx(weight / total, abs=1e-9), key


def test_ruled_rule_table_oracle_reactive():
    # blocked roads switch the region to the full reactive response
    flood = [0.2, 0.9, 0.2, 0.2]
    depth = [0.0, 0.45, 0.0, 0.0]
    blocked = [0, 4, 0, 0]
    summary = summary_with(flood=flood, depth=depth, blocked=blocked)
    proposal = b.RuledBackend().propose(prompt_for(summary), 4, 1.2, 0)
    expected = {
        (p.Verb.NOOP, 0): 0.5,
        (p.Verb.CLOSE_ROAD, 1): 0.4 * 0.9 * 1.0,
        (p.Verb.REROUTE_REGION, 1): 0.9 * 1.0 + 0.6,
        (p.Verb.DISPATCH_RELIEF, 1): 1.0 + 0.9,
        (p.Verb.HOLD_TRANSIT, 1): 0.5,
    }
    total = sum(expected.values())
    got = {(a.verb, a.region): prob for a, prob in zip(proposal.distribution.support, proposal.distribution.probs)}
    assert set(got) == set(expected)
    for key, weight in expected.items():
        assert got[key] == pytest.approx(weight / total, abs=1e-9), key


def test_ruled_quiet_map_is_mostly_noop():
    proposal = b.RuledBackend().propose(prompt_for(summary_with()), 4, 1.2, 0)
    got = {(a.verb, a.region): pr for a, pr in zip(proposal.distribution.support, proposal.distribution.probs)}
    assert got[(p.Verb.NOOP, 0)] == pytest.approx(1.0)


def test_ruled_feedback_escalates():
    flood = [0.2, 0.2, 0.8, 0.2]
    depth = [0.0, 0.0, 0.35, 0.0]
    blocked = [0, 0, 4, 0]
    base = b.RuledBackend().propose(prompt_for(summary_with(flood=flood, depth=depth, blocked=blocked)), 4, 1.2, 0)
    note = FeedbackNote(0.2, (("c", 0.1),), ("c",), ())
    esc = b.RuledBackend().propose(
        prompt_for(summary_with(flood=flood, depth=depth, blocked=blocked), feedback=note), 4, 1.2, 0
    )

    def relief_share(proposal):
        return sum(
            prob
            for action, prob in zip(proposal.distribution.support, proposal.distribution.probs)
            if action.verb is p.Verb.DISPATCH_RELIEF
        )

    assert relief_share(esc) > relief_share(base)


def test_ruled_requires_structured_summary():
    prompt = build_prompt("bare text", None, [], "dispatch", None, summary=None)
    with pytest.raises(BackendUnavailable):
        b.RuledBackend().propose(prompt, 4, 1.2, 0)


# --- scripted --------------------------------------------------------------------

def test_scripted_indexed_by_cycle_not_call_count():
    s0 = b.BackendProposal(p.PolicyDistribution.onehot(p.HighLevelAction(p.Verb.NOOP, 0)))
    s1 = b.BackendProposal(p.PolicyDistribution.onehot(p.HighLevelAction(p.Verb.CLOSE_ROAD, 1)))
    backend = b.ScriptedBackend([s0, s1])
    prompt = prompt_for(summary_with())
    assert backend.propose(prompt, 4, 1.2, 0) is s0
    assert backend.propose(prompt, 4, 1.2, 0) is s0  # repeated query, same cycle
    assert backend.propose(prompt, 4, 1.2, 1) is s1
    assert backend.propose(prompt, 4, 1.2, 2) is s0  # wraps


def test_default_script_valid():
    script = b.default_script(64)
    script[0].distribution.validate()


# --- ranking conversion ---------------------------------------------------------------

def test_ranking_softmax_over_negative_ranks():
    keys = ["dispatch_relief@3", "reroute_region@1", "noop@0"]
    dist = b.ranking_to_distribution(keys)
    weights = np.exp(-np.arange(3))
    expected = weights / weights.sum()
    assert np.allclose(dist.probs, expected)
    assert dist.support[0] == p.HighLevelAction(p.Verb.DISPATCH_RELIEF, 3)


# --- external over HTTP ------------------------------------------------------------------

class _Handler(BaseHTTPRequestHandler):
    responses = []
    requests = []

    def do_POST(self):
        length = int(self.headers["Content-Length"])
        _Handler.requests.append(json.loads(self.rfile.read(length)))
        status, body = _Handler.responses.pop(0)
        payload = json.dumps(body).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture
def http_backend():
    server = HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    _Handler.responses = []
    _Handler.requests = []
    yield f"http://127.0.0.1:{server.server_port}/", _Handler
    server.shutdown()


def test_external_probability_vector(http_backend):
    url, handler = http_backend
    vocab_size = len(p.action_vocabulary(4))
    probs = [0.0] * vocab_size
    probs[0] = 0.75
    probs[1] = 0.25
    handler.responses.append((200, {"probabilities": probs, "planned": {"f": 0.5, "t": 0.5, "c": 0.0, "r": 0.9}}))
    backend = b.ExternalBackend(url, timeout=2.0)
    proposal = backend.propose(prompt_for(summary_with()), 4, 1.2, 0)
    assert proposal.distribution.probs == (0.75, 0.25)
    assert proposal.planned_metrics == {"f": 0.5, "t": 0.5, "c": 0.0, "r": 0.9}
    sent = handler.requests[0]
    assert sent["tau"] == 1.2
    assert len(sent["vocabulary"]) == vocab_size
    assert "## STATE" in sent["prompt"]


def test_external_ranking_response(http_backend):
    url, handler = http_backend
    handler.responses.append((200, {"ranking": ["close_road@2", "noop@0"]}))
    proposal = b.ExternalBackend(url, timeout=2.0).propose(prompt_for(summary_with()), 4, 1.2, 1)
    assert proposal.distribution.support[0] == p.HighLevelAction(p.Verb.CLOSE_ROAD, 2)


@pytest.mark.parametrize(
    "response",
    [
        (500, {"error": "boom"}),
        (200, {"probabilities": [0.5]}),
        (200, {"ranking": []}),
        (200, {"nothing": True}),
        (200, {"probabilities": []}),
    ],
)
def test_external_failures_raise(http_backend, response):
    url, handler = http_backend
    handler.responses.append(response)
    with pytest.raises(BackendUnavailable):
        b.ExternalBackend(url, timeout=2.0).propose(prompt_for(summary_with()), 4, 1.2, 0)


def test_external_unreachable_raises():
    backend = b.ExternalBackend("http://127.0.0.1:1/", timeout=0.2)
    with pytest.raises(BackendUnavailable):
        backend.propose(prompt_for(summary_with()), 4, 1.2, 0)


# --- factory ---------------------------------------------------------------------------------

def test_make_backend_variants():
    assert b.make_backend("empty").name == "empty"
    assert b.make_backend("ruled").name == "ruled"
    assert b.make_backend("scripted").name == "scripted"
    assert b.make_backend("external", endpoint="http://x/").name == "external"
    with pytest.raises(ValueError):
        b.make_backend("external")
    with pytest.raises(ValueError):
        b.make_backend("quantum")
