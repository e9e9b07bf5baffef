"""Brute-force reference computations shared by several test modules."""

import numpy as np


def nearest_neighbor_bruteforce(prompts):
    """c_m by explicit pairwise cosine loops; ties to lowest index."""
    n = len(prompts)
    out = []
    for m in range(n):
        best, best_j = -np.inf, None
        for j in range(n):
            if j == m:
                continue
            a, b = prompts[m], prompts[j]
            s = float(np.dot(a, b) / (np.sqrt(np.dot(a, a)) * np.sqrt(np.dot(b, b))))
            if s > best:
                best, best_j = s, j
        out.append(best_j)
    return out


def adjacency_bruteforce(prompts):
    c = nearest_neighbor_bruteforce(prompts)
    n = len(prompts)
    a = np.zeros((n, n), dtype=int)
    for m in range(n):
        for j in range(n):
            if m != j and (j == c[m] or m == c[j] or c[m] == c[j]):
                a[m, j] = 1
    return a


def components_union_find(adj):
    n = len(adj)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(n):
            if adj[i][j]:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values(), key=lambda g: g[0])


def as_partition(clusters):
    return sorted(tuple(sorted(c)) for c in clusters)
