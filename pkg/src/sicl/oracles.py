"""Literal double-loop reference implementations of the contrastive objectives.

Deliberately naive: plain Python loops over anchors and candidates with
``math.exp``/``math.log`` and no shared code with :mod:`sicl.losses`.  Used by
the test suite and ``sicl verify`` as an independent check of the vectorized
path.  Conventions match the vectorized code: positives sit in the
denominator, ``Q`` is per anchor, cross-modal losses average both directions.
"""

import math


def _dot(u, v):
    return sum(a * b for a, b in zip(u, v))


def _rows(z):
    return [list(map(float, r)) for r in z]


def _q_loop(z_anchor, z_cand, tau, neg_sets, same_sets):
    p = []
    for i in range(len(z_anchor)):
        if not same_sets[i]:
            p.append(None)
            continue
        top = sum(math.exp(_dot(z_anchor[i], z_cand[s]) / tau) for s in same_sets[i])
        bottom = sum(math.exp(_dot(z_anchor[i], z_cand[a]) / tau) for a in neg_sets[i])
        p.append(top / bottom)
    used = [x for x in p if x is not None]
    if not used:
        return [1.0] * len(p)
    avg = sum(used) / len(used)
    return [1.0 if x is None else x / avg for x in p]


def nce(z, view_of, tau):
    z = _rows(z)
    n = len(z)
    total = 0.0
    for i in range(n):
        j = int(view_of[i])
        num = math.exp(_dot(z[i], z[j]) / tau)
        den = 0.0
        for a in range(n):
            if a != i:
                den += math.exp(_dot(z[i], z[a]) / tau)
        total += -math.log(num / den)
    return total / n


def sicl_sets(view_of, subjects):
    n = len(view_of)
    neg = [[a for a in range(n) if a != i and a != int(view_of[i])] for i in range(n)]
    same = [[a for a in neg[i] if subjects[a] == subjects[i]] for i in range(n)]
    return neg, same


def sicl_q(z, view_of, subjects, tau):
    z = _rows(z)
    neg, same = sicl_sets(view_of, subjects)
    return _q_loop(z, z, tau, neg, same)


def sicl(z, view_of, subjects, tau, q=None):
    z = _rows(z)
    n = len(z)
    neg, same = sicl_sets(view_of, subjects)
    if q is None:
        q = _q_loop(z, z, tau, neg, same)
    elif not hasattr(q, "__len__"):
        q = [q] * n
    total = 0.0
    for i in range(n):
        j = int(view_of[i])
        num = math.exp(_dot(z[i], z[j]) / tau)
        same_sum = sum(math.exp(_dot(z[i], z[s]) / tau) for s in same[i])
        rest = 0.0
        for k in range(n):
            if k != i and k not in same[i]:
                rest += math.exp(_dot(z[i], z[k]) / tau)
        total += -math.log(num / (q[i] * same_sum + rest))
    return total / n


def supcon(z, labels, tau):
    z = _rows(z)
    n = len(z)
    total = 0.0
    for i in range(n):
        positives = [p for p in range(n) if p != i and labels[p] == labels[i]]
        den = sum(math.exp(_dot(z[i], z[a]) / tau) for a in range(n) if a != i)
        acc = 0.0
        for p in positives:
            acc += math.log(math.exp(_dot(z[i], z[p]) / tau) / den)
        total += -acc / len(positives)
    return total / n


def si_supcon_sets(labels, subjects):
    n = len(labels)
    neg = [[a for a in range(n) if labels[a] != labels[i]] for i in range(n)]
    same = [[a for a in neg[i] if subjects[a] == subjects[i]] for i in range(n)]
    return neg, same


def si_supcon_q(z, labels, subjects, tau):
    z = _rows(z)
    neg, same = si_supcon_sets(labels, subjects)
    return _q_loop(z, z, tau, neg, same)


def si_supcon(z, labels, subjects, tau, q=None):
    z = _rows(z)
    n = len(z)
    neg, same = si_supcon_sets(labels, subjects)
    if q is None:
        q = _q_loop(z, z, tau, neg, same)
    elif not hasattr(q, "__len__"):
        q = [q] * n
    total = 0.0
    for i in range(n):
        positives = [p for p in range(n) if p != i and labels[p] == labels[i]]
        same_sum = sum(math.exp(_dot(z[i], z[s]) / tau) for s in same[i])
        rest = sum(math.exp(_dot(z[i], z[k]) / tau)
                   for k in range(n) if k != i and k not in same[i])
        d = q[i] * same_sum + rest
        acc = 0.0
        for p in positives:
            acc += math.log(math.exp(_dot(z[i], z[p]) / tau) / d)
        total += -acc / len(positives)
    return total / n


def _cmc_direction(za, zb, tau, subjects=None, q=None):
    n = len(za)
    if subjects is None:
        same = [[] for _ in range(n)]
    else:
        same = [[a for a in range(n) if a != i and subjects[a] == subjects[i]] for i in range(n)]
    if q is None:
        neg = [[a for a in range(n) if a != i] for i in range(n)]
        q = _q_loop(za, zb, tau, neg, same)
    elif not hasattr(q, "__len__"):
        q = [q] * n
    total = 0.0
    for i in range(n):
        num = math.exp(_dot(za[i], zb[i]) / tau)
        same_sum = sum(math.exp(_dot(za[i], zb[s]) / tau) for s in same[i])
        rest = sum(math.exp(_dot(za[i], zb[k]) / tau) for k in range(n) if k not in same[i])
        total += -math.log(num / (q[i] * same_sum + rest))
    return total / n


def cmc(zk, zm, tau):
    zk, zm = _rows(zk), _rows(zm)
    return 0.5 * (_cmc_direction(zk, zm, tau) + _cmc_direction(zm, zk, tau))


def si_cmc(zk, zm, subjects, tau, q=None):
    zk, zm = _rows(zk), _rows(zm)
    qa, qb = q if isinstance(q, tuple) else (q, q)
    return 0.5 * (_cmc_direction(zk, zm, tau, subjects, qa) + _cmc_direction(zm, zk, tau, subjects, qb))
