
import logging

import numpy as np

TIE_TOLERANCE = 1e-12

def levenshtein_opt(seq_src, seq_trg, nfactor=1, diff_function_bool=lambda x, y: x != y,
                    diff_function_value=lambda x, y: 1.0):
    """Levenshtein optimization which uses a matrix of only 2*n rows instead of m*n
    """
    m = np.zeros((2, len(seq_trg) + 1))
    insertion_cost = 1.0
    deletion_cost = 1.0

    m[0] = np.arange(len(seq_trg) + 1) * insertion_cost

    for row in range(1, len(seq_src) + 1):
        m[1][0] = row * deletion_cost

        for col in range(1, m.shape[1]):
            diff = 0.0

            if diff_function_bool(seq_src[row - 1], seq_trg[col - 1]):
                diff = diff_function_value(seq_src[row - 1], seq_trg[col - 1])

            m[1][col] = min(min(m[1][col - 1] + insertion_cost,
                                m[0][col] + deletion_cost),
                                m[0][col - 1] + diff)

        m[0] = m[1]

    return {"matrix": m,
            "value": m[0][-1],
            "similarity": 1.0 - m[0][-1] / nfactor}

def token_distance(token_src, token_trg):
    """Character edit distance normalized by the longest token: 0 for identical strings, 1 at most
    """
    if token_src == token_trg:
        return 0.0

    nfactor = max(len(token_src), len(token_trg))

    return 1.0 - levenshtein_opt(token_src, token_trg, nfactor=nfactor)["similarity"]

def monotone_alignment(seq_src, seq_trg, substitution_cost=token_distance, gap_cost=1.0):
    """Optimal monotone alignment of two sequences.

       The DP is computed over suffixes and traced forward from the start, so at equal cost the
       earliest source position gets matched first. Preference at ties: diagonal step (match or
       substitution), then skipping a source element, then skipping a target element.
       Returns the list of (src index, trg index) pairs on the diagonal steps and the total cost
    """
    n = len(seq_src)
    m = len(seq_trg)
    costs = np.zeros((n + 1, m + 1))
    sub = np.zeros((n, m))

    for i in range(n):
        for j in range(m):
            sub[i][j] = substitution_cost(seq_src[i], seq_trg[j])

    # costs[i][j]: cheapest alignment of seq_src[i:] and seq_trg[j:]
    for i in range(n, -1, -1):
        for j in range(m, -1, -1):
            if i == n:
                costs[i][j] = (m - j) * gap_cost
                continue
            if j == m:
                costs[i][j] = (n - i) * gap_cost
                continue

            costs[i][j] = min(sub[i][j] + costs[i + 1][j + 1],
                              gap_cost + costs[i + 1][j],
                              gap_cost + costs[i][j + 1])

    pairs = []
    i, j = 0, 0

    while i < n and j < m:
        best = costs[i][j]

        if sub[i][j] + costs[i + 1][j + 1] <= best + TIE_TOLERANCE:
            pairs.append((i, j))
            i += 1
            j += 1
        elif gap_cost + costs[i + 1][j] <= best + TIE_TOLERANCE:
            i += 1
        else:
            j += 1

    logging.debug(f"Alignment of {n} and {m} elements: {len(pairs)} pairs, cost {costs[0][0]}")

    return pairs, float(costs[0][0])
