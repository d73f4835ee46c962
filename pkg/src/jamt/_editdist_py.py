"""Pure-Python Levenshtein alignment; used when the compiled kernel is absent."""


def align_counts(ref, hyp):
    """(substitutions, insertions, deletions, matches) of one minimum-cost alignment.

    ``ref``/``hyp`` are integer sequences.  Among optimal paths the backtrace
    prefers diagonal moves, then deletions, then insertions.
    """
    n, m = len(ref), len(hyp)
    prev = list(range(m + 1))
    rows = [prev]
    for i in range(1, n + 1):
        cur = [i] + [0] * m
        r = ref[i - 1]
        for j in range(1, m + 1):
            diag = prev[j - 1] + (r != hyp[j - 1])
            dele = prev[j] + 1
            ins = cur[j - 1] + 1
            cur[j] = min(diag, dele, ins)
        rows.append(cur)
        prev = cur
    sub = ins = dele = match = 0
    i, j = n, m
    while i > 0 or j > 0:
        d = rows[i][j]
        if i > 0 and j > 0 and d == rows[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            if ref[i - 1] == hyp[j - 1]:
                match += 1
            else:
                sub += 1
            i -= 1
            j -= 1
        elif i > 0 and d == rows[i - 1][j] + 1:
            dele += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return sub, ins, dele, match
