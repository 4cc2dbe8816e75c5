"""JSON scenario files: loading with line-numbered diagnostics, and canonical dumping.

Numbers that must stay exact (rates, weights, times, lengths) may be given
as JSON integers or as strings such as ``"2.5e6"``, ``"0.0096"`` or
``"5/2"``.  Unknown keys are rejected.
"""
from __future__ import annotations

import json
import json.scanner
import re
from importlib import resources
from pathlib import Path

from .model import ConfigError, EligibilityMatrix, rational
from .scheduler import Variant
from .sim import LengthLaw, Scenario, SourceKind, TrafficSource

__all__ = [
    "ScenarioError",
    "CHECK_KINDS",
    "load_scenario",
    "parse_scenario",
    "scenario_to_document",
    "dump_scenario",
    "bundled_names",
    "resolve_scenario",
    "format_rational",
]


class ScenarioError(ConfigError):
    """Invalid scenario document; the message starts with the offending line when known."""


class _Obj(dict):
    line = None


class _Arr(list):
    line = None


def _positioned_decoder(text: str) -> json.JSONDecoder:
    """A stdlib decoder whose objects and arrays remember the line they start on."""
    decoder = json.JSONDecoder(object_pairs_hook=_Obj)
    base_object, base_array = decoder.parse_object, decoder.parse_array

    def line_of(pos):
        return text.count("\n", 0, pos) + 1

    def parse_object(s_and_end, *args):
        obj, end = base_object(s_and_end, *args)
        if not isinstance(obj, _Obj):
            obj = _Obj(obj)
        obj.line = line_of(s_and_end[1] - 1)
        return obj, end

    def parse_array(s_and_end, *args):
        arr, end = base_array(s_and_end, *args)
        arr = _Arr(arr)
        arr.line = line_of(s_and_end[1] - 1)
        return arr, end

    decoder.parse_object = parse_object
    decoder.parse_array = parse_array
    decoder.scan_once = json.scanner.py_make_scanner(decoder)
    return decoder


def _fail(node, path: str, message: str):
    line = getattr(node, "line", None)
    where = f"line {line}: " if line else ""
    raise ScenarioError(f"{where}{path}: {message}")


def _keys(node, path, required=(), optional=()):
    if not isinstance(node, dict):
        _fail(node, path, "expected an object")
    unknown = sorted(set(node) - set(required) - set(optional))
    if unknown:
        _fail(node, path, f"unknown key(s) {', '.join(unknown)}")
    missing = [k for k in required if k not in node]
    if missing:
        _fail(node, path, f"missing key(s) {', '.join(missing)}")


def _num(node, parent, path):
    if isinstance(node, bool) or not isinstance(node, (int, str, float)):
        _fail(parent, path, f"expected a number or numeric string, got {node!r}")
    try:
        return rational(node)
    except (ValueError, TypeError, ZeroDivisionError):
        _fail(parent, path, f"not a valid number: {node!r}")


def _law(node, path):
    if isinstance(node, (int, str)) and not isinstance(node, bool):
        return LengthLaw.fixed(_num(node, None, path))
    _keys(node, path, ("kind",), ("value", "lo", "hi", "values"))
    kind = node["kind"]
    try:
        if kind == "fixed":
            _keys(node, path, ("kind", "value"))
            return LengthLaw.fixed(_num(node["value"], node, path + ".value"))
        if kind == "uniform":
            _keys(node, path, ("kind", "lo", "hi"))
            lo, hi = _num(node["lo"], node, path + ".lo"), _num(node["hi"], node, path + ".hi")
            if lo.denominator != 1 or hi.denominator != 1:
                _fail(node, path, "uniform bounds must be integers")
            return LengthLaw.uniform(int(lo), int(hi))
        if kind == "cycle":
            _keys(node, path, ("kind", "values"))
            if not isinstance(node["values"], list):
                _fail(node, path + ".values", "expected a list")
            return LengthLaw.cycle([_num(v, node, path + ".values") for v in node["values"]])
    except ScenarioError:
        raise
    except ConfigError as exc:
        _fail(node, path, str(exc))
    _fail(node, path + ".kind", f"unknown length law {kind!r} (fixed, uniform, cycle)")


def _source(node, path):
    _keys(node, path, ("kind",), ("length", "start", "packets", "rate", "intervals"))
    kind = node["kind"]
    if kind == "backlogged":
        _keys(node, path, ("kind", "length"), ("start",))
        return TrafficSource.backlogged(_law(node["length"], path + ".length"),
                                        _num(node.get("start", 0), node, path + ".start"))
    if kind == "deterministic":
        _keys(node, path, ("kind", "packets"))
        packets = node["packets"]
        if not isinstance(packets, list):
            _fail(node, path + ".packets", "expected a list of [time, length] or [time, length, count]")
        arrivals = []
        for idx, item in enumerate(packets):
            where = f"{path}.packets[{idx}]"
            if not isinstance(item, list) or len(item) not in (2, 3):
                _fail(packets, where, "expected [time, length] or [time, length, count]")
            t, length = _num(item[0], item, where), _num(item[1], item, where)
            count = item[2] if len(item) == 3 else 1
            if isinstance(count, bool) or not isinstance(count, int) or count < 1:
                _fail(item, where, "count must be a positive integer")
            arrivals.extend([(t, length)] * count)
        return TrafficSource.deterministic(arrivals)
    if kind == "iid":
        _keys(node, path, ("kind", "rate", "length"), ("start",))
        return TrafficSource.iid(_num(node["rate"], node, path + ".rate"), _law(node["length"], path + ".length"),
                                 _num(node.get("start", 0), node, path + ".start"))
    if kind == "onoff":
        _keys(node, path, ("kind", "intervals", "length"))
        intervals = node["intervals"]
        if not isinstance(intervals, list) or not intervals:
            _fail(node, path + ".intervals", "expected a nonempty list of [start, end]")
        items = []
        for idx, item in enumerate(intervals):
            where = f"{path}.intervals[{idx}]"
            if not isinstance(item, list) or len(item) != 2:
                _fail(intervals, where, "expected [start, end] (end may be null)")
            end = None if item[1] is None else _num(item[1], item, where)
            items.append((_num(item[0], item, where), end))
        return TrafficSource.onoff(items, _law(node["length"], path + ".length"))
    _fail(node, path + ".kind", f"unknown source kind {kind!r} (backlogged, deterministic, iid, onoff)")


CHECK_KINDS = {
    "steady_state": ((), ("min_length",)),
    "worst_case": (("user", "t0", "t1"), ()),
    "level_gap": (("bound",), ()),
    "separation": (("t0", "t1"), ()),
    "isolated_cluster": (("users", "t0", "t1"), ()),
    "work_identity": ((), ()),
    "tag_dominance": ((), ()),
    "rates": (("t0", "t1", "expected"), ("tolerance",)),
    "level_crossover": (("after", "servers", "expected"), ("tolerance",)),
}


def _check(node, path, user_names, server_names):
    _keys(node, path, ("kind",), ("user", "users", "t0", "t1", "bound", "min_length", "expected",
                                  "tolerance", "after", "servers"))
    kind = node["kind"]
    if kind not in CHECK_KINDS:
        _fail(node, path + ".kind", f"unknown check {kind!r} ({', '.join(sorted(CHECK_KINDS))})")
    required, optional = CHECK_KINDS[kind]
    _keys(node, path, ("kind",) + required, optional)
    out = {"kind": kind}
    for key in ("t0", "t1", "bound", "min_length", "tolerance", "after"):
        if key in node:
            out[key] = _num(node[key], node, f"{path}.{key}")
    if "user" in node:
        if node["user"] not in user_names:
            _fail(node, path + ".user", f"unknown user {node['user']!r}")
        out["user"] = node["user"]
    if "users" in node:
        if not isinstance(node["users"], list) or any(u not in user_names for u in node["users"]):
            _fail(node, path + ".users", "expected a list of known user names")
        out["users"] = list(node["users"])
    if "servers" in node:
        pair = node["servers"]
        if not isinstance(pair, list) or len(pair) != 2 or any(s not in server_names for s in pair):
            _fail(node, path + ".servers", "expected two known server names")
        out["servers"] = list(pair)
    if "expected" in node:
        exp = node["expected"]
        if kind == "rates":
            if not isinstance(exp, dict) or any(u not in user_names for u in exp):
                _fail(node, path + ".expected", "expected an object mapping user names to rates")
            out["expected"] = {u: _num(v, exp, f"{path}.expected.{u}") for u, v in exp.items()}
        else:
            out["expected"] = _num(exp, node, path + ".expected")
    if "t0" in out and "t1" in out and out["t1"] <= out["t0"]:
        _fail(node, path, "t1 must be greater than t0")
    return out


_TOP_REQUIRED = ("users", "servers", "eligibility", "horizon")
_TOP_OPTIONAL = ("name", "description", "variant", "delta", "seed", "sample_period", "snapshots",
                 "l_max", "backlogged", "checks", "fluid_packet_length")


def parse_scenario(doc, name: str = "scenario") -> Scenario:
    """Build a :class:`Scenario` from a decoded document (plain dicts work too)."""
    _keys(doc, "scenario", _TOP_REQUIRED, _TOP_OPTIONAL)
    users, servers = doc["users"], doc["servers"]
    if not isinstance(users, list) or not users:
        _fail(doc, "users", "expected a nonempty list")
    if not isinstance(servers, list) or not servers:
        _fail(doc, "servers", "expected a nonempty list")
    user_names, weights, sources, quanta = [], [], [], []
    for idx, u in enumerate(users):
        path = f"users[{idx}]"
        _keys(u, path, ("name", "sources"), ("weight", "quantum"))
        if not isinstance(u["name"], str) or not u["name"]:
            _fail(u, path + ".name", "expected a nonempty string")
        if u["name"] in user_names:
            _fail(u, path + ".name", f"duplicate user name {u['name']!r}")
        user_names.append(u["name"])
        weights.append(_num(u.get("weight", 1), u, path + ".weight"))
        quanta.append(_num(u["quantum"], u, path + ".quantum") if "quantum" in u else None)
        if not isinstance(u["sources"], list):
            _fail(u, path + ".sources", "expected a list")
        try:
            sources.append([_source(s, f"{path}.sources[{j}]") for j, s in enumerate(u["sources"])])
        except ScenarioError:
            raise
        except ConfigError as exc:
            _fail(u, path, str(exc))
    server_names, rates = [], []
    for idx, s in enumerate(servers):
        path = f"servers[{idx}]"
        _keys(s, path, ("name", "rate"))
        if not isinstance(s["name"], str) or not s["name"] or s["name"] in server_names:
            _fail(s, path + ".name", "expected a unique nonempty string")
        server_names.append(s["name"])
        rates.append(_num(s["rate"], s, path + ".rate"))
    rows = doc["eligibility"]
    if not isinstance(rows, list) or len(rows) != len(users):
        _fail(doc, "eligibility", f"expected {len(users)} rows, one per user")
    for idx, row in enumerate(rows):
        if not isinstance(row, list) or len(row) != len(servers) or any(x not in (0, 1) or isinstance(x, bool) for x in row):
            _fail(row if isinstance(row, list) else rows, f"eligibility[{idx}]",
                  f"expected {len(servers)} entries of 0/1 for user {user_names[idx]}")
        if not any(row):
            _fail(row, f"eligibility[{idx}]", f"user {user_names[idx]} has no eligible server")
    for k in range(len(servers)):
        if not any(row[k] for row in rows):
            _fail(rows, "eligibility", f"server {server_names[k]} (column {k}) has no eligible user")
    variant = doc.get("variant", "full")
    try:
        variant = Variant.parse(variant)
    except ValueError:
        _fail(doc, "variant", f"unknown variant {variant!r} (full, reduced, sfq)")
    snapshots = doc.get("snapshots", "event")
    if snapshots not in ("event", "sample"):
        _fail(doc, "snapshots", "expected 'event' or 'sample'")
    seed = doc.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        _fail(doc, "seed", "expected an integer")
    backlogged = doc.get("backlogged")
    if backlogged is not None:
        if not isinstance(backlogged, list) or any(b not in user_names for b in backlogged):
            _fail(doc, "backlogged", "expected a list of known user names")
        backlogged = list(backlogged)
    checks_doc = doc.get("checks", [])
    if not isinstance(checks_doc, list):
        _fail(doc, "checks", "expected a list")
    checks = [_check(c, f"checks[{j}]", user_names, server_names) for j, c in enumerate(checks_doc)]
    if any(q is not None for q in quanta) and any(q is None for q in quanta):
        _fail(doc, "users", "give a quantum for every user or for none")
    opt = {}
    for key in ("delta", "sample_period", "l_max"):
        if doc.get(key) is not None:
            opt[key] = _num(doc[key], doc, key)
    fluid = None
    if doc.get("fluid_packet_length") is not None:
        fluid = _num(doc["fluid_packet_length"], doc, "fluid_packet_length")
    try:
        scenario = Scenario(
            matrix=EligibilityMatrix(rows),
            rates=rates,
            weights=weights,
            sources=sources,
            horizon=_num(doc["horizon"], doc, "horizon"),
            variant=variant,
            seed=seed,
            snapshots=snapshots,
            name=doc.get("name", name),
            description=doc.get("description", ""),
            user_names=user_names,
            server_names=server_names,
            quanta=None if quanta[0] is None else quanta,
            backlogged=backlogged,
            checks=checks,
            fluid_packet_length=fluid,
            **opt,
        )
    except ScenarioError:
        raise
    except ConfigError as exc:
        _fail(doc, "scenario", str(exc))
    return scenario


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read {path}: {exc.strerror}") from None
    return loads_scenario(text, name=path.stem)


def loads_scenario(text: str, name: str = "scenario") -> Scenario:
    try:
        doc = _positioned_decoder(text).decode(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"line {exc.lineno}: invalid JSON: {exc.msg} (column {exc.colno})") from None
    return parse_scenario(doc, name=name)


# -- dumping ---------------------------------------------------------------------

def format_rational(x) -> str:
    """Exact text for a rational: integer, terminating decimal or ``p/q``."""
    x = rational(x)
    if x.denominator == 1:
        return str(x.numerator)
    den = x.denominator
    twos = fives = 0
    while den % 2 == 0:
        den //= 2
        twos += 1
    while den % 5 == 0:
        den //= 5
        fives += 1
    if den != 1:
        return f"{x.numerator}/{x.denominator}"
    digits = max(twos, fives)
    scaled = abs(x.numerator) * (10 ** digits // x.denominator)
    whole, frac = divmod(scaled, 10 ** digits)
    sign = "-" if x < 0 else ""
    return f"{sign}{whole}.{str(frac).rjust(digits, '0').rstrip('0')}"


def _law_doc(law: LengthLaw):
    if law.kind == "fixed":
        return {"kind": "fixed", "value": format_rational(law.values[0])}
    if law.kind == "uniform":
        return {"kind": "uniform", "lo": int(law.values[0]), "hi": int(law.values[1])}
    return {"kind": "cycle", "values": [format_rational(v) for v in law.values]}


def _source_doc(src: TrafficSource):
    if src.kind is SourceKind.BACKLOGGED:
        out = {"kind": "backlogged", "length": _law_doc(src.law)}
        if src.start:
            out["start"] = format_rational(src.start)
        return out
    if src.kind is SourceKind.DETERMINISTIC:
        packets = []
        for t, length in src.arrivals:
            if packets and packets[-1][0] == format_rational(t) and packets[-1][1] == format_rational(length):
                packets[-1][2] += 1
            else:
                packets.append([format_rational(t), format_rational(length), 1])
        return {"kind": "deterministic", "packets": packets}
    if src.kind is SourceKind.IID:
        out = {"kind": "iid", "rate": format_rational(src.rate), "length": _law_doc(src.law)}
        if src.start:
            out["start"] = format_rational(src.start)
        return out
    return {
        "kind": "onoff",
        "intervals": [[format_rational(a), None if b is None else format_rational(b)] for a, b in src.intervals],
        "length": _law_doc(src.law),
    }


_CHECK_KEY_ORDER = ("kind", "user", "users", "servers", "t0", "t1", "after", "bound", "min_length",
                    "expected", "tolerance")


def _check_doc(check):
    out = {}
    for key in sorted(check, key=_CHECK_KEY_ORDER.index):
        value = check[key]
        if isinstance(value, dict):
            out[key] = {u: format_rational(v) for u, v in value.items()}
        elif isinstance(value, (str, list)):
            out[key] = value
        else:
            out[key] = format_rational(value)
    return out


def scenario_to_document(sc: Scenario) -> dict:
    doc = {"name": sc.name}
    if sc.description:
        doc["description"] = sc.description
    users = []
    for i, name in enumerate(sc.user_names):
        u = {"name": name, "weight": format_rational(sc.weights[i])}
        if sc.quanta is not None:
            u["quantum"] = format_rational(sc.quanta[i])
        u["sources"] = [_source_doc(s) for s in sc.sources[i]]
        users.append(u)
    doc["users"] = users
    doc["servers"] = [{"name": n, "rate": format_rational(r)} for n, r in zip(sc.server_names, sc.rates)]
    doc["eligibility"] = [list(row) for row in sc.matrix.entries]
    doc["variant"] = sc.variant.value
    if sc.delta is not None:
        doc["delta"] = format_rational(sc.delta)
    doc["horizon"] = format_rational(sc.horizon)
    doc["seed"] = sc.seed
    doc["snapshots"] = sc.snapshots
    if sc.sample_period is not None:
        doc["sample_period"] = format_rational(sc.sample_period)
    doc["l_max"] = format_rational(sc.l_max)
    if sc.fluid_packet_length is not None:
        doc["fluid_packet_length"] = format_rational(sc.fluid_packet_length)
    if sc.backlogged is not None:
        doc["backlogged"] = list(sc.backlogged)
    if sc.checks:
        doc["checks"] = [_check_doc(c) for c in sc.checks]
    return doc


def dump_scenario(sc: Scenario) -> str:
    """Canonical JSON text; loading it back and dumping again gives the same text."""
    doc = scenario_to_document(sc)
    text = json.dumps(doc, indent=2)
    return _compact_rows(text) + "\n"


_SCALAR_ARRAY = re.compile(r"\[([^\[\]{}]*)\]")


def _compact_rows(text: str) -> str:
    """Put arrays of scalars (matrix rows, packets, intervals) on one line."""
    def join(m):
        items = [x.strip() for x in m.group(1).split(",")]
        return "[" + ", ".join(x for x in items if x) + "]"
    return _SCALAR_ARRAY.sub(join, text)


# -- bundled library -----------------------------------------------------------

def bundled_names() -> list:
    root = resources.files("cm4fq") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def resolve_scenario(ref) -> Scenario:
    """Load ``ref`` as a file path, or as the name of a bundled scenario."""
    path = Path(ref)
    if path.exists():
        return load_scenario(path)
    name = str(ref)
    if name.endswith(".json"):
        name = name[:-5]
    if name in bundled_names():
        text = (resources.files("cm4fq") / "scenarios" / f"{name}.json").read_text()
        return loads_scenario(text, name=name)
    raise ScenarioError(f"no scenario file {ref!r} and no bundled scenario of that name "
                        f"(bundled: {', '.join(bundled_names())})")
