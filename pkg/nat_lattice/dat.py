import nat_lattice.core
import attr
import numpy as np
import networkx as nx
import logging
import math

logger = logging.getLogger(__name__)

DEFAULT_BEAM_SIZE = 5
DEFAULT_UPSAMPLE = 8
MAX_ORACLE_PATHS = 10**6

def _to_frozen_matrix(values):
    matrix = np.array(values, dtype=np.float64)
    matrix.setflags(write=False)
    return matrix

def _optional_frozen_matrix(values):
    if values is None:
        return None
    return _to_frozen_matrix(values)

@attr.s(frozen=True, eq=False)
class DecoderStates:
    h = attr.ib(converter=_to_frozen_matrix)

    @h.validator
    def _check_states(self, attribute, value):
        if value.ndim != 2 or value.shape[0] < 2:
            raise ValueError('Decoder states must be an M x d matrix with M >= 2, got shape {}'.format(value.shape))
        if not np.all(np.isfinite(value)):
            raise ValueError('Decoder states contain non-finite entries')

    @property
    def num_vertices(self):
        return self.h.shape[0]

    @property
    def hidden_size(self):
        return self.h.shape[1]

@attr.s(frozen=True, eq=False)
class DATParams:
    w_q = attr.ib(converter=_to_frozen_matrix)
    w_k = attr.ib(converter=_to_frozen_matrix)
    w_q_star = attr.ib(default=None, converter=_optional_frozen_matrix)
    w_k_star = attr.ib(default=None, converter=_optional_frozen_matrix)

    def __attrs_post_init__(self):
        d = self.w_q.shape[0]
        for name in ['w_q', 'w_k', 'w_q_star', 'w_k_star']:
            matrix = getattr(self, name)
            if matrix is not None and matrix.shape != (d, d):
                raise ValueError('Transition weight {} has shape {}, expected ({}, {})'.format(name, matrix.shape, d, d))
        if (self.w_q_star is None) != (self.w_k_star is None):
            raise ValueError('Star transition weights must be given together')

    @property
    def hidden_size(self):
        return self.w_q.shape[0]

    @property
    def has_star(self):
        return self.w_q_star is not None

def _support_mask(num_vertices):
    return np.triu(np.ones((num_vertices, num_vertices), dtype=bool), k=1)

@attr.s(frozen=True, eq=False)
class TransitionMatrix:
    """Row-normalized log transition probabilities over the upper triangle.

    The final row is terminal and holds no mass.
    """
    log_e = attr.ib(converter=_to_frozen_matrix)

    @log_e.validator
    def _check_transition(self, attribute, value):
        if value.ndim != 2 or value.shape[0] != value.shape[1] or value.shape[0] < 2:
            raise ValueError('Transition matrix must be square with M >= 2, got shape {}'.format(value.shape))
        outside = value[~_support_mask(value.shape[0])]
        if np.any(np.isfinite(outside)):
            raise ValueError('Transition matrix has mass outside the strict upper triangle')
        totals = nat_lattice.core.logsumexp(value[:-1], axis=1)
        deviation = np.max(np.abs(totals))
        if not np.isfinite(deviation) or deviation > nat_lattice.core.ROW_NORMALIZATION_TOLERANCE:
            raise ValueError('Transition matrix rows are not normalized (max deviation {})'.format(deviation))

    @classmethod
    def from_scores(cls, scores):
        return cls(masked_log_softmax(scores))

    @property
    def num_vertices(self):
        return self.log_e.shape[0]

    def probs(self):
        return np.exp(self.log_e)

@attr.s(frozen=True)
class Path:
    indices = attr.ib(converter=nat_lattice.core.as_ids)

    @indices.validator
    def _check_indices(self, attribute, value):
        if any(later <= earlier for earlier, later in zip(value[:-1], value[1:])):
            raise ValueError('Path indices {} are not strictly increasing'.format(value))

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)

def validate_path(path, num_vertices):
    indices = path.indices if isinstance(path, Path) else tuple(path)
    if len(indices) < 2 or indices[0] != 0 or indices[-1] != num_vertices - 1:
        raise ValueError('Path {} does not run from vertex 0 to vertex {}'.format(indices, num_vertices - 1))
    return Path(indices)

def masked_log_softmax(scores):
    scores = np.asarray(scores, dtype=np.float64)
    num_vertices = scores.shape[0]
    masked = np.where(_support_mask(num_vertices), scores, -np.inf)
    log_e = np.full_like(masked, -np.inf)
    log_e[:-1] = nat_lattice.core.log_softmax(masked[:-1])
    return log_e

def _check_dimensions(states, params):
    if states.hidden_size != params.hidden_size:
        raise ValueError('Decoder states have hidden size {} but transition weights have {}'.format(
            states.hidden_size,
            params.hidden_size
        ))

def transition_scores(
    states,
    params,
    variant='plain'
):
    """Masked attention scores Q K^T / sqrt(d) plus the intermediates backprop needs."""
    _check_dimensions(states, params)
    h = states.h
    q = h @ params.w_q
    k = h @ params.w_k
    cache = {'q': q, 'k': k}
    if variant == 'plain':
        q_final, k_final = q, k
    elif variant == 'star':
        if not params.has_star:
            raise ValueError('Star transition requested but star weights are absent')
        q_rectified = np.maximum(q, 0.0)
        k_rectified = np.maximum(k, 0.0)
        q_final = q_rectified @ params.w_q_star
        k_final = k_rectified @ params.w_k_star
        cache.update({'q_rectified': q_rectified, 'k_rectified': k_rectified})
    else:
        raise ValueError('Transition variant \'{}\' not recognized'.format(variant))
    cache.update({'q_final': q_final, 'k_final': k_final})
    scale = math.sqrt(params.hidden_size)
    scores = (q_final @ k_final.T) / scale
    scores = np.where(_support_mask(states.num_vertices), scores, -np.inf)
    return scores, cache

def build_transition(
    states,
    params,
    variant='plain'
):
    scores, _ = transition_scores(states, params, variant=variant)
    return TransitionMatrix.from_scores(scores)

def transition_backward(
    states,
    params,
    grad_scores,
    variant='plain'
):
    """Chain gradients on the transition scores into states and weights.

    Returns ``(grad_states, grads)`` where ``grads`` maps weight names to
    gradients of the same shape.
    """
    _, cache = transition_scores(states, params, variant=variant)
    grad_scores = np.where(_support_mask(states.num_vertices), grad_scores, 0.0)
    scale = math.sqrt(params.hidden_size)
    grad_q_final = grad_scores @ cache['k_final'] / scale
    grad_k_final = grad_scores.T @ cache['q_final'] / scale
    grads = dict()
    if variant == 'star':
        grads['w_q_star'] = cache['q_rectified'].T @ grad_q_final
        grads['w_k_star'] = cache['k_rectified'].T @ grad_k_final
        grad_q = (grad_q_final @ params.w_q_star.T) * (cache['q'] > 0)
        grad_k = (grad_k_final @ params.w_k_star.T) * (cache['k'] > 0)
    else:
        grad_q = grad_q_final
        grad_k = grad_k_final
    grads['w_q'] = states.h.T @ grad_q
    grads['w_k'] = states.h.T @ grad_k
    grad_states = grad_q @ params.w_q.T + grad_k @ params.w_k.T
    return grad_states, grads

def complete_dag(num_vertices):
    graph = nx.DiGraph()
    graph.add_nodes_from(range(num_vertices))
    graph.add_edges_from(
        (source, target)
        for source in range(num_vertices)
        for target in range(source + 1, num_vertices)
    )
    return graph

def transition_graph(transition):
    """Transition matrix as a DAG with ``log_prob`` and ``prob`` edge weights."""
    log_e = transition.log_e
    graph = nx.DiGraph()
    graph.add_nodes_from(range(transition.num_vertices))
    sources, targets = np.nonzero(np.isfinite(log_e))
    for source, target in zip(sources, targets):
        graph.add_edge(
            int(source),
            int(target),
            log_prob=float(log_e[source, target]),
            prob=float(np.exp(log_e[source, target]))
        )
    return graph

def enumerate_paths(M, L):
    if M < 2 or L < 2:
        raise ValueError('Paths need at least two vertices (got M={}, L={})'.format(M, L))
    if math.comb(M - 2, L - 2) > MAX_ORACLE_PATHS:
        raise nat_lattice.core.OracleGuardError('Path enumeration C({}, {}) exceeds oracle guard'.format(M - 2, L - 2))
    if L > M:
        return list()
    graph = complete_dag(M)
    paths = [
        Path(path)
        for path in nx.all_simple_paths(graph, 0, M - 1, cutoff=L - 1)
        if len(path) == L
    ]
    return sorted(paths, key=lambda path: path.indices)

def augment_target(target):
    return (nat_lattice.core.BOS_ID,) + nat_lattice.core.as_ids(target) + (nat_lattice.core.EOS_ID,)

def _log_probs(emissions):
    if isinstance(emissions, nat_lattice.core.EmissionLattice):
        return emissions.log_probs
    return np.asarray(emissions, dtype=np.float64)

def path_log_prob(
    emissions,
    transition,
    target,
    path
):
    """Log-probability of generating the BOS/EOS-augmented target along one path."""
    log_probs = _log_probs(emissions)
    augmented = augment_target(target)
    indices = path.indices if isinstance(path, Path) else tuple(path)
    if len(indices) != len(augmented):
        raise ValueError('Path of length {} cannot carry augmented target of length {}'.format(len(indices), len(augmented)))
    total = sum(float(log_probs[vertex, token_id]) for vertex, token_id in zip(indices, augmented))
    total += sum(float(transition.log_e[source, target]) for source, target in zip(indices[:-1], indices[1:]))
    return total

def dat_forward_backward(
    log_probs,
    log_e,
    augmented
):
    num_steps = len(augmented)
    num_vertices = log_probs.shape[0]
    emissions = log_probs[:, list(augmented)]
    forward = np.full((num_steps, num_vertices), -np.inf)
    forward[0, 0] = emissions[0, 0]
    for step in range(1, num_steps):
        forward[step] = emissions[:, step] + nat_lattice.core.logsumexp(forward[step - 1][:, np.newaxis] + log_e, axis=0)
    backward = np.full((num_steps, num_vertices), -np.inf)
    backward[-1, -1] = 0.0
    for step in range(num_steps - 2, -1, -1):
        backward[step] = nat_lattice.core.logsumexp(log_e + (emissions[:, step + 1] + backward[step + 1])[np.newaxis, :], axis=1)
    return forward, backward, emissions

def dat_logprob_grad(
    emissions,
    transition,
    target
):
    """Log marginal over all paths plus gradients w.r.t. emission and transition logits.

    Returns ``(log_marginal, grad_emission_logits, grad_transition_scores)``.
    """
    log_probs = _log_probs(emissions)
    log_e = transition.log_e
    num_vertices = log_probs.shape[0]
    if log_e.shape[0] != num_vertices:
        raise ValueError('Emission lattice has {} vertices but transition matrix has {}'.format(num_vertices, log_e.shape[0]))
    augmented = augment_target(target)
    if num_vertices < len(augmented):
        raise nat_lattice.core.InfeasibleLengthError('Target of length {} needs at least {} vertices but graph has {}'.format(
            len(augmented) - 2,
            len(augmented),
            num_vertices
        ))
    forward, backward, step_emissions = dat_forward_backward(log_probs, log_e, augmented)
    log_marginal = float(forward[-1, -1])
    if not np.isfinite(log_marginal):
        logger.warning('Target has zero probability under graph; returning zero gradients')
        return log_marginal, np.zeros_like(log_probs), np.zeros_like(log_e)
    with np.errstate(invalid='ignore'):
        occupancy = np.exp(forward + backward - log_marginal)
    grad_log_probs = np.zeros_like(log_probs)
    for step, token_id in enumerate(augmented):
        grad_log_probs[:, token_id] += occupancy[step]
    edge_posterior = np.zeros_like(log_e)
    for step in range(len(augmented) - 1):
        ahead = step_emissions[:, step + 1] + backward[step + 1]
        edge_posterior += np.exp(forward[step][:, np.newaxis] + log_e + ahead[np.newaxis, :] - log_marginal)
    grad_scores = edge_posterior - np.exp(log_e) * edge_posterior.sum(axis=1, keepdims=True)
    grad_emission_logits = nat_lattice.core.log_softmax_backward(grad_log_probs, log_probs)
    return log_marginal, grad_emission_logits, grad_scores

def vertex_tokens(emissions):
    log_probs = _log_probs(emissions)
    return np.argmax(log_probs, axis=1), np.max(log_probs, axis=1)

def path_joint_score(
    emissions,
    transition,
    path,
    tokens=None
):
    """Sum of transitions plus interior-vertex emissions; endpoints carry no emission term."""
    log_probs = _log_probs(emissions)
    indices = path.indices if isinstance(path, Path) else tuple(path)
    interior = indices[1:-1]
    if tokens is None:
        best_tokens, _ = vertex_tokens(log_probs)
        tokens = [best_tokens[vertex] for vertex in interior]
    tokens = nat_lattice.core.as_ids(tokens)
    if len(tokens) != len(interior):
        raise ValueError('Path has {} interior vertices but {} tokens were given'.format(len(interior), len(tokens)))
    total = sum(float(transition.log_e[source, target]) for source, target in zip(indices[:-1], indices[1:]))
    total += sum(float(log_probs[vertex, token_id]) for vertex, token_id in zip(interior, tokens))
    return total

def merge_repeats(tokens):
    ids = nat_lattice.core.as_ids(tokens)
    return nat_lattice.core.TokenSequence([
        token_id for index, token_id in enumerate(ids)
        if index == 0 or token_id != ids[index - 1]
    ])

def _decode_result(path, best_tokens):
    path = Path(path)
    tokens = nat_lattice.core.TokenSequence([best_tokens[vertex] for vertex in path.indices[1:-1]])
    return tokens, path

def _dat_greedy(log_e, vertex_scores, best_tokens, max_len, lookahead):
    final_vertex = log_e.shape[0] - 1
    path = [0]
    current = 0
    while current != final_vertex:
        if len(path) - 1 >= max_len:
            current = final_vertex
        elif lookahead:
            current = int(np.argmax(log_e[current] + vertex_scores))
        else:
            current = int(np.argmax(log_e[current]))
        path.append(current)
    return _decode_result(path, best_tokens)

def _dat_viterbi(log_e, vertex_scores, best_tokens, max_len, length_penalty):
    num_vertices = log_e.shape[0]
    final_vertex = num_vertices - 1
    # best[n, j]: best score reaching vertex j after emitting n tokens (j emits the n-th)
    best = np.full((max_len + 1, num_vertices), -np.inf)
    pointer = np.zeros((max_len + 1, num_vertices), dtype=np.int64)
    best[0, 0] = 0.0
    interior = np.zeros(num_vertices, dtype=bool)
    interior[1:final_vertex] = True
    for count in range(1, max_len + 1):
        candidates = best[count - 1][:, np.newaxis] + log_e
        pointer[count] = np.argmax(candidates, axis=0)
        best[count] = np.where(interior, np.max(candidates, axis=0) + vertex_scores, -np.inf)
    selected_count = None
    selected_score = -np.inf
    for count in range(max_len + 1):
        closing = best[count] + log_e[:, final_vertex]
        score = float(np.max(closing)) - length_penalty * count
        if score > selected_score:
            selected_count = count
            selected_score = score
    if selected_count is None:
        raise nat_lattice.core.InfeasibleLengthError('No path reaches the final vertex')
    path = [final_vertex]
    vertex = int(np.argmax(best[selected_count] + log_e[:, final_vertex]))
    for count in range(selected_count, 0, -1):
        path.append(vertex)
        vertex = int(pointer[count, vertex])
    path.append(0)
    return _decode_result(path[::-1], best_tokens)

def _dat_beam(log_probs, log_e, beam_size, max_len, token_top_k):
    final_vertex = log_e.shape[0] - 1
    token_order = np.argsort(-log_probs, axis=1, kind='stable')[:, :token_top_k]
    beam = [(0.0, 0, tuple(), (0,))]
    finished = list()
    while len(beam) > 0:
        candidates = list()
        for score, vertex, tokens, path in beam:
            for successor in range(vertex + 1, final_vertex + 1):
                transition_score = log_e[vertex, successor]
                if not np.isfinite(transition_score):
                    continue
                if successor == final_vertex:
                    finished.append((score + transition_score, tokens, path + (successor,)))
                    continue
                if len(tokens) >= max_len:
                    continue
                for token_id in token_order[successor]:
                    candidates.append((
                        score + transition_score + log_probs[successor, token_id],
                        successor,
                        tokens + (int(token_id),),
                        path + (successor,)
                    ))
        candidates.sort(key=lambda candidate: (-candidate[0], candidate[1], candidate[2]))
        beam = candidates[:beam_size]
    if len(finished) == 0:
        raise nat_lattice.core.InfeasibleLengthError('Beam search produced no hypothesis reaching the final vertex')
    finished.sort(key=lambda hypothesis: (-hypothesis[0], hypothesis[2], hypothesis[1]))
    score, tokens, path = finished[0]
    return nat_lattice.core.TokenSequence(tokens), Path(path)

def dat_decode(
    emissions,
    transition,
    strategy='greedy',
    beam_size=DEFAULT_BEAM_SIZE,
    max_len=None,
    token_top_k=None,
    length_penalty=0.0,
    dedup=False
):
    """Decode a (token sequence, path) pair from a vertex lattice and its transitions.

    Strategies are ``greedy`` (most likely next vertex), ``lookahead`` (next
    vertex by transition plus best emission), ``viterbi`` (exact maximizer of
    the joint score) and ``beam``. ``max_len`` bounds the number of emitted
    tokens. With ``dedup`` consecutive equal tokens along the path are merged
    into one; the returned path is unchanged.
    """
    log_probs = _log_probs(emissions)
    log_e = transition.log_e
    num_vertices = log_probs.shape[0]
    if log_e.shape[0] != num_vertices:
        raise ValueError('Emission lattice has {} vertices but transition matrix has {}'.format(num_vertices, log_e.shape[0]))
    if max_len is None:
        max_len = num_vertices - 2
    if max_len < 1 and num_vertices > 2:
        raise ValueError('Maximum decode length must be at least 1, got {}'.format(max_len))
    max_len = min(max_len, num_vertices - 2)
    if beam_size < 1:
        raise ValueError('Beam size must be at least 1, got {}'.format(beam_size))
    best_tokens, best_scores = vertex_tokens(log_probs)
    vertex_scores = best_scores.copy()
    vertex_scores[0] = 0.0
    vertex_scores[-1] = 0.0
    if strategy == 'greedy':
        tokens, path = _dat_greedy(log_e, vertex_scores, best_tokens, max_len, lookahead=False)
    elif strategy == 'lookahead':
        tokens, path = _dat_greedy(log_e, vertex_scores, best_tokens, max_len, lookahead=True)
    elif strategy == 'viterbi':
        tokens, path = _dat_viterbi(log_e, vertex_scores, best_tokens, max_len, length_penalty)
    elif strategy == 'beam':
        if token_top_k is None:
            token_top_k = beam_size
        tokens, path = _dat_beam(log_probs, log_e, beam_size, max_len, token_top_k)
    else:
        raise ValueError('DAT decode strategy \'{}\' not recognized'.format(strategy))
    if dedup:
        tokens = merge_repeats(tokens)
    return tokens, path
