"""Dev scratch: finite-difference check of rasterize_backward (not shipped)."""
import numpy as np
import splatsim as ss


def random_scene(rng, n=5):
    pos = np.column_stack([
        rng.uniform(-0.1, 0.1, n), rng.uniform(-0.1, 0.1, n), rng.uniform(0.8, 1.6, n)])
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    scales = rng.uniform(0.02, 0.06, (n, 3))
    colors = rng.uniform(0.1, 0.9, (n, 3))
    opac = rng.uniform(0.2, 0.8, n)
    return ss.Scene(pos, q, np.log(scales), colors, ss.scene.logit(opac))


def loss_and_grads(scene, cam, gc, gd, cfg):
    out = ss.rasterize(scene, cam, cfg)
    loss = float((gc * out.color).sum() + (gd * out.depth).sum())
    return loss, out


def main():
    cam = ss.Camera(fx=60, fy=60, cx=15.5, cy=15.5, width=32, height=32)
    cfg = ss.RenderConfig()
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        scene = random_scene(rng)
        gc = rng.normal(size=(32, 32, 3))
        gd = rng.normal(size=(32, 32))
        loss0, out = loss_and_grads(scene, cam, gc, gd, cfg)
        grads = ss.rasterize_backward(scene, cam, out, gc, gd, cfg)

        h = 1e-4
        params = [("position", scene.positions, grads.position),
                  ("rotation", scene.rotations, grads.rotation),
                  ("log? scale", None, None),
                  ("color", scene.colors, grads.color),
                  ("opacity", None, None)]
        # scale: analytic grad is wrt linear scale; perturb linear scale via logـscales
        for name, arr, g in params:
            if arr is None:
                continue
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                ix = it.multi_index
                orig = arr[ix]
                arr[ix] = orig + h
                lp, _ = loss_and_grads(scene, cam, gc, gd, cfg)
                arr[ix] = orig - h
                lm, _ = loss_and_grads(scene, cam, gc, gd, cfg)
                arr[ix] = orig
                fd = (lp - lm) / (2 * h)
                an = g[ix]
                err = abs(an - fd) / max(abs(an), abs(fd), 1e-4)
                if err > worst:
                    worst = err
                    print(f"seed {seed} {name}{ix}: fd={fd:.6g} an={an:.6g} rel={err:.3g}")
        # linear scale check
        scales = np.exp(scene.log_scales.astype(np.float64))
        for i in range(len(scene)):
            for k in range(3):
                s0 = scales[i, k]
                scene.log_scales[i, k] = np.log(s0 + h)
                lp, _ = loss_and_grads(scene, cam, gc, gd, cfg)
                scene.log_scales[i, k] = np.log(s0 - h)
                lm, _ = loss_and_grads(scene, cam, gc, gd, cfg)
                scene.log_scales[i, k] = np.log(s0)
                fd = (lp - lm) / (2 * h)
                an = grads.scale[i, k]
                err = abs(an - fd) / max(abs(an), abs(fd), 1e-4)
                if err > worst:
                    worst = err
                    print(f"seed {seed} scale[{i},{k}]: fd={fd:.6g} an={an:.6g} rel={err:.3g}")
        # opacity via logits
        opac = np.array(ss.scene.sigmoid(scene.opacity_logits.astype(np.float64)))
        for i in range(len(scene)):
            o0 = opac[i]
            scene.opacity_logits[i] = ss.scene.logit(o0 + h)
            lp, _ = loss_and_grads(scene, cam, gc, gd, cfg)
            scene.opacity_logits[i] = ss.scene.logit(o0 - h)
            lm, _ = loss_and_grads(scene, cam, gc, gd, cfg)
            scene.opacity_logits[i] = ss.scene.logit(o0)
            fd = (lp - lm) / (2 * h)
            an = grads.opacity[i]
            err = abs(an - fd) / max(abs(an), abs(fd), 1e-4)
            if err > worst:
                worst = err
                print(f"seed {seed} opacity[{i}]: fd={fd:.6g} an={an:.6g} rel={err:.3g}")
    print("worst rel err:", worst)


if __name__ == "__main__":
    main()
