#include "ootd/codec.hpp"

#include <chrono>
#include <cmath>

#include "ootd/errors.hpp"
#include "ootd/optim.hpp"

namespace ootd {

double psnr(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "psnr");
    double mse = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        double d = static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i]);
        mse += d * d;
    }
    mse /= static_cast<double>(a.size());
    if (mse <= 0.0) return 1e9;  // identical images: effectively infinite
    return 10.0 * std::log10(1.0 / mse);
}

PretrainedCodec pretrain_codec(const std::vector<Tensor>& images, int steps, Rng rng,
                               CodecConfig cfg, int batch, double lr) {
    if (images.empty()) throw InputError("pretrain_codec: empty dataset");
    if (steps <= 0) throw InputError("pretrain_codec: steps must be positive");
    if (batch <= 0) throw InputError("pretrain_codec: batch must be positive");

    PretrainedCodec out;
    out.cfg = cfg;
    Codec codec(out.store, "codec", cfg, rng.fork("init"));

    AdamWConfig ocfg;
    ocfg.lr = lr;
    ocfg.weight_decay = 0.0;  // pure reconstruction; decay just biases it
    AdamW opt(out.store, ocfg);

    auto t0 = std::chrono::steady_clock::now();
    int n = static_cast<int>(images.size());
    for (int step = 0; step < steps; ++step) {
        // Cosine decay to 1% of the peak rate; the plateau the codec settles
        // on otherwise is dominated by late-stage gradient noise.
        double frac = steps > 1 ? static_cast<double>(step) / (steps - 1) : 0.0;
        opt.set_lr(lr * (0.01 + 0.99 * 0.5 * (1.0 + std::cos(frac * 3.14159265358979))));
        Rng rb = rng.fork("batch").fork(static_cast<uint64_t>(step));
        std::vector<Tensor> grads(static_cast<size_t>(out.store.count()));
        double loss_sum = 0.0;
        for (int s = 0; s < batch; ++s) {
            int idx = static_cast<int>(rb.next_unit() * n);
            if (idx >= n) idx = n - 1;
            Tape tape(true);
            BoundParams p(tape, out.store, true);
            Var img = tape.constant(images[static_cast<size_t>(idx)]);
            Var rec = codec.decode_g(tape, p, codec.encode_g(tape, p, img));
            Var loss = mse_loss(tape, rec, img);
            loss_sum += static_cast<double>(tape.value(loss).data()[0]);
            tape.backward(loss);
            tape.for_each_param_grad([&](int pid, const Tensor& g) {
                Tensor& dst = grads[static_cast<size_t>(pid)];
                if (!dst.defined()) dst = Tensor(g.shape());
                for (size_t i = 0; i < g.size(); ++i) dst.data()[i] += g.data()[i];
            });
        }
        double loss = loss_sum / batch;
        if (!std::isfinite(loss))
            throw TrainingError("codec pretraining diverged (non-finite loss) at step " +
                                std::to_string(step));
        for (Tensor& g : grads)
            if (g.defined())
                for (size_t i = 0; i < g.size(); ++i) g.data()[i] /= static_cast<float>(batch);
        opt.step(out.store, grads);

        double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        out.curve.push_back({step, loss, secs});
    }
    if (!cfg.identity) {
        // Record the latent gain so downstream diffusion sees unit-RMS
        // latents. Measured with the gain still at its initial 1.0, then
        // baked into the store; the encode/decode round trip is unaffected.
        double sq = 0.0;
        long cnt = 0;
        for (const Tensor& img : images) {
            Tensor z = codec.encode(img);
            for (size_t i = 0; i < z.size(); ++i) sq += (double)z.at(i) * z.at(i);
            cnt += (long)z.size();
        }
        double rms = cnt > 0 ? std::sqrt(sq / (double)cnt) : 1.0;
        if (rms > 1e-8)
            out.store.value(out.store.id_of("codec.latent_scale")).data()[0] =
                (float)(1.0 / rms);
    }
    out.frozen = true;
    return out;
}

}  // namespace ootd
