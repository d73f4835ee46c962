# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled Levenshtein alignment (same contract as _editdist_py.align_counts)."""
from libc.stdlib cimport malloc, free


def align_counts(ref, hyp):
    cdef Py_ssize_t n = len(ref), m = len(hyp), i, j, w = len(hyp) + 1
    cdef long *a = <long *> malloc((n + 1) * sizeof(long))
    cdef long *b = <long *> malloc((m + 1) * sizeof(long))
    cdef int *d = <int *> malloc((n + 1) * w * sizeof(int))
    cdef int diag, dele, ins, best, cost
    cdef long sub = 0, nins = 0, ndel = 0, match = 0
    if a == NULL or b == NULL or d == NULL:
        free(a); free(b); free(d)
        raise MemoryError()
    try:
        for i in range(n):
            a[i] = ref[i]
        for j in range(m):
            b[j] = hyp[j]
        for j in range(m + 1):
            d[j] = j
        for i in range(1, n + 1):
            d[i * w] = i
            for j in range(1, m + 1):
                cost = 0 if a[i - 1] == b[j - 1] else 1
                diag = d[(i - 1) * w + j - 1] + cost
                dele = d[(i - 1) * w + j] + 1
                ins = d[i * w + j - 1] + 1
                best = diag
                if dele < best:
                    best = dele
                if ins < best:
                    best = ins
                d[i * w + j] = best
        i = n
        j = m
        while i > 0 or j > 0:
            if i > 0 and j > 0:
                cost = 0 if a[i - 1] == b[j - 1] else 1
                if d[i * w + j] == d[(i - 1) * w + j - 1] + cost:
                    if cost:
                        sub += 1
                    else:
                        match += 1
                    i -= 1
                    j -= 1
                    continue
            if i > 0 and d[i * w + j] == d[(i - 1) * w + j] + 1:
                ndel += 1
                i -= 1
            else:
                nins += 1
                j -= 1
    finally:
        free(a); free(b); free(d)
    return sub, nins, ndel, match
