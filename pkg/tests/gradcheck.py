"""Central-difference oracle for model gradients."""


from sptlab.model import backward, forward
from sptlab.numeric import SeededRng
from sptlab.objectives import cls_loss, spt_loss


def loss_and_grads(params, cfg, x, pad_len, head, labels=None, mask=None):
    out, cache = forward(params, cfg, x, pad_len, head=head, mask=mask, mode="train")
    if head == "cls":
        loss, g = cls_loss(out, labels)
    else:
        kind = "continuous" if cfg.input_kind == "continuous" else "discrete"
        loss, g = spt_loss(out, x, mask, kind)
    return loss, backward(cache, g)


def max_rel_error(params, cfg, x, pad_len, head, labels=None, mask=None, h=1e-5, n_probe=6, seed=0):
    """Worst relative error over a few random coordinates of every block."""
    _, grads = loss_and_grads(params, cfg, x, pad_len, head, labels, mask)
    rng = SeededRng(seed, "gradcheck")
    worst = {}
    for name in sorted(params):
        p = params[name]
        idx = rng.integers(p.size, n_probe)
        errs = []
        for k in idx:
            orig = p.flat[k]
            p.flat[k] = orig + h
            lp, _ = loss_and_grads(params, cfg, x, pad_len, head, labels, mask)
            p.flat[k] = orig - h
            lm, _ = loss_and_grads(params, cfg, x, pad_len, head, labels, mask)
            p.flat[k] = orig
            fd = (lp - lm) / (2 * h)
            an = grads[name].flat[k]
            errs.append(abs(fd - an) / max(abs(fd), abs(an), 1e-6))
        worst[name] = max(errs)
    return worst
