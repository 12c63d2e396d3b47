"""Dinic maximum flow on integer capacities.

Deterministic by construction: vertices are dense integers, adjacency lists
keep insertion order, and BFS/DFS visit edges in that order, so equal-flow
networks always produce the same residual graph (and therefore the same
canonical minimum cut downstream).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field


@dataclass
class _Edge:
    to: int
    cap: int
    rev: int  # index of the reverse edge in adj[to]


@dataclass
class Dinic:
    n: int
    adj: list[list[_Edge]] = field(init=False)

    def __post_init__(self) -> None:
        self.adj = [[] for _ in range(self.n)]

    def add_edge(self, u: int, v: int, cap: int) -> tuple[int, int]:
        """Returns (u, index) so callers can inspect residual capacity later."""
        fwd = _Edge(v, cap, len(self.adj[v]))
        bwd = _Edge(u, 0, len(self.adj[u]))
        self.adj[u].append(fwd)
        self.adj[v].append(bwd)
        return u, len(self.adj[u]) - 1

    def _bfs(self, s: int, t: int) -> list[int] | None:
        level = [-1] * self.n
        level[s] = 0
        q = deque([s])
        while q:
            u = q.popleft()
            for e in self.adj[u]:
                if e.cap > 0 and level[e.to] < 0:
                    level[e.to] = level[u] + 1
                    q.append(e.to)
        return level if level[t] >= 0 else None

    def _augment(self, s: int, t: int, level: list[int], it: list[int]) -> int:
        # iterative blocking-flow DFS (graphs can be deeper than the
        # interpreter recursion limit)
        path: list[_Edge] = []
        u = s
        while True:
            if u == t:
                f = min(e.cap for e in path)
                for e in path:
                    e.cap -= f
                    self.adj[e.to][e.rev].cap += f
                return f
            advanced = False
            while it[u] < len(self.adj[u]):
                e = self.adj[u][it[u]]
                if e.cap > 0 and level[e.to] == level[u] + 1:
                    path.append(e)
                    u = e.to
                    advanced = True
                    break
                it[u] += 1
            if advanced:
                continue
            level[u] = -1  # dead end; prune
            if not path:
                return 0
            u = self.adj[path[-1].to][path[-1].rev].to
            path.pop()
            it[u] += 1

    def max_flow(self, s: int, t: int) -> int:
        flow = 0
        while (level := self._bfs(s, t)) is not None:
            it = [0] * self.n
            while (f := self._augment(s, t, level, it)) > 0:
                flow += f
        return flow

    def residual_reachable(self, s: int) -> set[int]:
        """Source side of the canonical (nearest-source) minimum cut."""
        seen = {s}
        q = deque([s])
        while q:
            u = q.popleft()
            for e in self.adj[u]:
                if e.cap > 0 and e.to not in seen:
                    seen.add(e.to)
                    q.append(e.to)
        return seen

    def residual_cap(self, handle: tuple[int, int]) -> int:
        u, i = handle
        return self.adj[u][i].cap
