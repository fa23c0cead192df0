import nat_lattice.core
import attr
import numpy as np
import logging
import hashlib

logger = logging.getLogger(__name__)

PERTURB_MODES = ('delete', 'replace_unk', 'swap')

@attr.s(frozen=True)
class PerturbSpec:
    mode = attr.ib()
    p = attr.ib(converter=float)
    window = attr.ib(default=None)
    seed = attr.ib(default=0, converter=int)
    symmetric = attr.ib(default=False, converter=bool)

    def __attrs_post_init__(self):
        if self.mode not in PERTURB_MODES:
            raise ValueError('Perturbation mode \'{}\' not recognized (expected one of {})'.format(self.mode, PERTURB_MODES))
        if not 0.0 <= self.p <= 1.0:
            raise ValueError('Perturbation probability must lie in [0, 1], got {}'.format(self.p))
        if self.mode == 'swap' and (self.window is None or self.window < 1):
            raise ValueError('Swap perturbation needs a window of at least 1, got {}'.format(self.window))

    def to_json(self):
        return attr.asdict(self)

def make_rng(seed):
    """Portable generator: PCG64 seeded through SeedSequence."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))

def stream_key(entry_id):
    digest = hashlib.blake2b(str(entry_id).encode('utf-8'), digest_size=8).digest()
    return int.from_bytes(digest, 'little')

def entry_rng(seed, entry_id):
    """Independent stream per entry id so results do not depend on corpus order."""
    seed_sequence = np.random.SeedSequence(seed, spawn_key=(stream_key(entry_id),))
    return np.random.Generator(np.random.PCG64(seed_sequence))

def _swap_offset(rng, window, symmetric):
    if not symmetric:
        return int(rng.integers(1, window + 1))
    draw = int(rng.integers(0, 2 * window))
    return draw - window if draw < window else draw - window + 1

def perturb_sequence(
    sequence,
    spec,
    rng=None,
    unk_id=nat_lattice.core.UNK_ID
):
    if rng is None:
        rng = make_rng(spec.seed)
    ids = list(nat_lattice.core.as_ids(sequence))
    if spec.mode == 'delete':
        draws = rng.random(len(ids))
        ids = [token_id for token_id, draw in zip(ids, draws) if draw >= spec.p]
    elif spec.mode == 'replace_unk':
        draws = rng.random(len(ids))
        ids = [unk_id if draw < spec.p else token_id for token_id, draw in zip(ids, draws)]
    else:
        last = len(ids) - 1
        for position in range(len(ids)):
            if rng.random() >= spec.p:
                continue
            offset = _swap_offset(rng, spec.window, spec.symmetric)
            partner = min(max(position + offset, 0), last)
            ids[position], ids[partner] = ids[partner], ids[position]
    return nat_lattice.core.TokenSequence(ids)

def perturb_corpus(
    entries,
    spec
):
    """Perturb each entry's source with a stream derived from its id."""
    perturbed = list()
    num_source_tokens = 0
    num_output_tokens = 0
    for entry in entries:
        source = perturb_sequence(entry.source, spec, rng=entry_rng(spec.seed, entry.id))
        num_source_tokens += len(entry.source)
        num_output_tokens += len(source)
        metadata = dict(entry.metadata or {})
        metadata['perturb'] = spec.to_json()
        perturbed.append(attr.evolve(entry, source=source, metadata=metadata))
    logger.info('Perturbed {} entries ({} tokens in, {} tokens out, mode {})'.format(
        len(perturbed),
        num_source_tokens,
        num_output_tokens,
        spec.mode
    ))
    return perturbed
