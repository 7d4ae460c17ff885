"""Two-mode (LoS / NLoS) IMM cycle for a single range measurement.

Mode probabilities from the discriminator do not depend on the previous
mode, so the IMM mixing step collapses: both mode-conditioned updates start
from the one propagated belief, and only the probability evolution and the
moment-matched combination remain.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from ._common import gaussian_likelihood
from .dmv import los_correct, range_linearize
from .skf import (beacon_los_correct, beacon_nlos_correct, nlos_correct,
                  nlos_correct_compact, update_book)
from .types import (Beacon, Belief, BiasBook, BiasModel, DegenerateGeometryError,
                    ModeProbabilities, NumericalError, RangeMeasurement, UpdateOutcome,
                    make_covariance, skipped_outcome, wrap_angle)

__all__ = [
    "ImmDiagnostics", "ImmResult", "combine", "combine_bias_book",
    "evolve_mode_probabilities", "gaussian_likelihood", "process_measurement",
    "sequential_update",
]

logger = logging.getLogger(__name__)

LIKELIHOOD_FLOOR = 1e-300
COMBINE_RULES = ("paper_literal", "mixture")
LIKELIHOOD_VARIANCES = ("bound", "nominal")


@dataclass(frozen=True)
class ImmDiagnostics:
    prior_modes: ModeProbabilities
    posterior_modes: ModeProbabilities
    out_los: Optional[UpdateOutcome]
    out_nlos: Optional[UpdateOutcome]
    spread_term: np.ndarray
    flags: tuple[str, ...] = ()


@dataclass(frozen=True)
class ImmResult:
    belief: Belief
    book: BiasBook
    diagnostics: ImmDiagnostics


def _evolve(prior: ModeProbabilities, L_los: float, L_nlos: float):
    if L_los < 0.0 or L_nlos < 0.0:
        raise ValueError("likelihoods must be non-negative")
    num_los = L_los * prior.p_los
    num_nlos = L_nlos * prior.p_nlos
    den = num_los + num_nlos
    if den < LIKELIHOOD_FLOOR:
        return prior, True
    p_nlos = num_nlos / den
    return ModeProbabilities(1.0 - p_nlos, p_nlos), False


def evolve_mode_probabilities(prior: ModeProbabilities, likelihood_los: float,
                              likelihood_nlos: float) -> ModeProbabilities:
    """Bayes update of the mode probabilities; keeps the prior if both vanish."""
    return _evolve(prior, likelihood_los, likelihood_nlos)[0]


def _spread(beliefs: Sequence[Belief], weights: Sequence[float]):
    ref = beliefs[0]
    deltas = []
    for b in beliefs:
        d = b.x - ref.x
        if ref.heading is not None:
            d[ref.heading] = wrap_angle(d[ref.heading])
        deltas.append(d)
    mean_delta = sum(w * d for w, d in zip(weights, deltas))
    x = ref.x + mean_delta
    spread = sum(w * np.outer(d - mean_delta, d - mean_delta) for w, d in zip(weights, deltas))
    return x, spread


def combine(out_los: UpdateOutcome, out_nlos: UpdateOutcome,
            posterior: ModeProbabilities) -> Belief:
    """Moment-match the two mode-conditioned beliefs into one Gaussian."""
    beliefs = (out_los.belief, out_nlos.belief)
    w = posterior.as_tuple()
    x, spread = _spread(beliefs, w)
    P = w[0] * beliefs[0].P + w[1] * beliefs[1].P + spread
    return beliefs[0].replace(x=x, P=make_covariance(P))


def combine_bias_book(book_los: BiasBook, book_nlos: BiasBook,
                      posterior: ModeProbabilities, rule: str = "paper_literal") -> BiasBook:
    """Combine the per-mode bias books.

    ``paper_literal`` scales the NLoS-updated book by the NLoS posterior.
    ``mixture`` weights both branch books by their posteriors.
    """
    if rule == "paper_literal":
        return BiasBook(book_nlos.owner,
                        {l: posterior.p_nlos * C for l, C in book_nlos.C.items()})
    if rule == "mixture":
        keys = sorted(set(book_los.C) | set(book_nlos.C))
        n = next(iter(book_nlos.C.values()), next(iter(book_los.C.values()), np.zeros(0))).size
        return BiasBook(book_nlos.owner, {
            l: posterior.p_los * book_los.get(l, n) + posterior.p_nlos * book_nlos.get(l, n)
            for l in keys})
    raise ValueError(f"unknown combine rule {rule!r}")


def _los_branch(bel_i, book_i, target, book_j, meas, R):
    try:
        jac = range_linearize(bel_i, target)
    except DegenerateGeometryError as exc:
        return skipped_outcome(bel_i, str(exc)), book_i
    if isinstance(target, Beacon):
        out = beacon_los_correct(bel_i, target, meas.z, R)
        book_j = None
    else:
        out = los_correct(bel_i, target, meas.z, R, jac=jac)
    if out.skipped or not np.any(out.gain):
        return out, book_i
    return out, update_book(book_i, book_j, out.gain, jac)


def _nlos_branch(bel_i, book_i, target, bias_i, book_j, meas, R, compact):
    i = book_i.owner
    if isinstance(target, Beacon):
        out, C_ii = beacon_nlos_correct(bel_i, bias_i, book_i.get(i, bel_i.n), target,
                                        meas.z, R)
        return out, book_i.with_entries({i: C_ii})
    if compact:
        out, C_ii = nlos_correct_compact(bel_i, target, bias_i, book_i.get(i, bel_i.n),
                                         meas.z, R)
        return out, book_i.with_entries({i: C_ii})
    return nlos_correct(bel_i, target, bias_i, book_i, book_j, meas.z, R)


def _safe(branch, bel_i, book_i, *args):
    try:
        return branch(bel_i, book_i, *args)
    except NumericalError as exc:
        return skipped_outcome(bel_i, str(exc)), book_i


def _likelihood(out: UpdateOutcome, which: str) -> float:
    if out.skipped:
        return 0.0
    if which == "nominal":
        return gaussian_likelihood(out.innovation, out.nominal_var)
    return out.likelihood


def process_measurement(bel_i: Belief, target: Union[Belief, Beacon], bias_i: BiasModel,
                        book_i: BiasBook, book_j: Optional[BiasBook],
                        meas: RangeMeasurement, modes: ModeProbabilities, R: float, *,
                        compact: bool = False, combine_rule: str = "paper_literal",
                        likelihood_variance: str = "bound") -> ImmResult:
    """Run one IMM cycle for ``meas`` against an agent belief or a beacon.

    Both branches start from ``bel_i``.  A mode with zero prior probability
    is not run at all, so certain modes reduce to the single-branch update.
    """
    if combine_rule not in COMBINE_RULES:
        raise ValueError(f"unknown combine rule {combine_rule!r}")
    if likelihood_variance not in LIKELIHOOD_VARIANCES:
        raise ValueError(f"unknown likelihood variance {likelihood_variance!r}")
    zero = np.zeros((bel_i.n, bel_i.n))
    flags: list[str] = []

    if modes.p_nlos == 0.0:
        out, book = _safe(_los_branch, bel_i, book_i, target, book_j, meas, R)
        post = modes
        if out.skipped:
            flags.append("los_skipped")
        book = combine_bias_book(book, book, post, combine_rule)
        return ImmResult(out.belief, book, ImmDiagnostics(modes, post, out, None, zero,
                                                          tuple(flags)))
    if modes.p_los == 0.0:
        out, book = _safe(_nlos_branch, bel_i, book_i, target, bias_i, book_j, meas, R,
                          compact)
        post = modes
        if out.skipped:
            flags.append("nlos_skipped")
        book = combine_bias_book(book, book, post, combine_rule)
        return ImmResult(out.belief, book, ImmDiagnostics(modes, post, None, out, zero,
                                                          tuple(flags)))

    out_los, book_los = _safe(_los_branch, bel_i, book_i, target, book_j, meas, R)
    out_nlos, book_nlos = _safe(_nlos_branch, bel_i, book_i, target, bias_i, book_j, meas,
                                R, compact)
    if out_los.skipped and out_nlos.skipped:
        flags.append("both_skipped")
        return ImmResult(bel_i, book_i, ImmDiagnostics(modes, modes, out_los, out_nlos, zero,
                                                       tuple(flags)))
    if out_los.skipped or out_nlos.skipped:
        # the surviving branch takes full weight
        post = ModeProbabilities(0.0, 1.0) if out_los.skipped else ModeProbabilities(1.0, 0.0)
        flags.append("los_skipped" if out_los.skipped else "nlos_skipped")
    elif not np.any(out_los.gain) and not np.any(out_nlos.gain):
        # neither branch moved the prior (omega* = 1 in both); nothing to learn
        post = modes
        flags.append("no_information")
    else:
        post, degenerate = _evolve(modes, _likelihood(out_los, likelihood_variance),
                                   _likelihood(out_nlos, likelihood_variance))
        if degenerate:
            flags.append("likelihood_underflow")
    belief = combine(out_los, out_nlos, post)
    _, spread = _spread((out_los.belief, out_nlos.belief), post.as_tuple())
    book = combine_bias_book(book_los, book_nlos, post, combine_rule)
    return ImmResult(belief, book, ImmDiagnostics(modes, post, out_los, out_nlos,
                                                  make_covariance(spread), tuple(flags)))


def sequential_update(bel_i: Belief, bias_i: BiasModel, book_i: BiasBook,
                      measurements: Sequence[RangeMeasurement],
                      modes: Sequence[ModeProbabilities],
                      targets: Mapping[int, Union[Belief, Beacon]],
                      partner_books: Mapping[int, Optional[BiasBook]], R: float,
                      on_update: Optional[Callable[[Belief, ImmResult], None]] = None,
                      **options) -> tuple[Belief, BiasBook, list[ImmDiagnostics]]:
    """Process concurrent measurements one after another, by ascending target id.

    Each update uses the belief produced by the previous one as its prior.
    ``on_update(prior, result)`` is called after every processed measurement.
    """
    if len(measurements) != len(modes):
        raise ValueError("one mode probability pair is needed per measurement")
    if len({m.stamp for m in measurements}) > 1:
        raise ValueError("sequential updates need measurements sharing one stamp")
    order = sorted(range(len(measurements)), key=lambda k: measurements[k].target)
    diagnostics = []
    for k in order:
        meas = measurements[k]
        try:
            res = process_measurement(bel_i, targets[meas.target], bias_i, book_i,
                                      partner_books.get(meas.target), meas, modes[k], R,
                                      **options)
        except (NumericalError, DegenerateGeometryError) as exc:
            logger.info("measurement %s -> %s skipped: %s", meas.observer, meas.target, exc)
            continue
        if on_update is not None:
            on_update(bel_i, res)
        bel_i, book_i = res.belief, res.book
        diagnostics.append(res.diagnostics)
    return bel_i, book_i, diagnostics
