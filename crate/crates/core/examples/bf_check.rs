// Scratch check: clustering vs brute force on tiny grids (deleted before ship).
use advoice::features::FeatureMatrix;
use advoice::dsp::FeatureStage;

fn fm(rows: usize, cols: usize, data: Vec<f64>) -> FeatureMatrix {
    FeatureMatrix { data, rows, cols, stage: FeatureStage::Original, frame_len: 400, hop_len: 160, sample_rate: 16000 }
}

fn partitions(n: usize, k: usize) -> Vec<Vec<usize>> {
    // all surjective assignments of n items onto k labels, up to label renaming (canonical: first-appearance order)
    let mut out = vec![];
    let mut a = vec![0usize; n];
    loop {
        // canonical check: label i appears only after 0..i-1
        let mut max_seen = 0usize;
        let mut ok = true;
        let mut used = vec![false; k];
        for &x in &a {
            if x > max_seen { ok = false; break; }
            if x == max_seen { max_seen += 1; }
            if x < k { used[x] = true; }
        }
        if ok && max_seen == k { out.push(a.clone()); }
        // increment base-k counter
        let mut i = n;
        loop {
            if i == 0 { return out; }
            i -= 1;
            a[i] += 1;
            if a[i] < k { break; }
            a[i] = 0;
        }
    }
}

fn sse(data: &[f64], n: usize, d: usize, assign: &[usize], k: usize) -> f64 {
    let mut sums = vec![0.0; k * d];
    let mut counts = vec![0usize; k];
    for i in 0..n { counts[assign[i]] += 1; for j in 0..d { sums[assign[i]*d+j] += data[i*d+j]; } }
    let mut total = 0.0;
    for i in 0..n { let c = assign[i]; let m = counts[c] as f64;
        for j in 0..d { let diff = data[i*d+j] - sums[c*d+j]/m; total += diff*diff; } }
    total
}

fn main() {
    let vals_1d = [0.0f64, 4.0, 9.0]; // overridden below
    let mut fail_k = 0; let mut fail_w = 0; let mut total_k = 0; let mut total_w = 0;
    // d=1, N in 2..=6 over {0,4,9}^N for kmeans; N up to 8 for warped over {0,9}^N
    for n in 2..=6usize {
        let mut idx = vec![0usize; n];
        loop {
            let vals = [0.0f64, 9.0, 9.0];  // two distinct values
            let data: Vec<f64> = idx.iter().map(|&i| vals[i]).collect();
            for k in 1..=n {
                let m = fm(n, 1, data.clone());
                let c = advoice::feco::kmeans_cluster(&m, k, 12345).unwrap();
                let best = partitions(n, k).iter().map(|a| sse(&data, n, 1, a, k)).fold(f64::INFINITY, f64::min);
                total_k += 1;
                if c.sse > best + 1e-9 { fail_k += 1; if fail_k < 6 { println!("KM n={n} k={k} data={data:?} got {} best {best}", c.sse); } }
            }
            let mut i = n; loop { if i == 0 { break; } i -= 1; idx[i] += 1; if idx[i] < 3 { break; } idx[i] = 0; }
            if idx.iter().all(|&x| x == 0) { break; }
        }
    }

    // kmeans d=2 over rows from {0,9}^2
    for n in 2..=5usize {
        let mut idx = vec![0usize; n];
        loop {
            let data: Vec<f64> = idx.iter().flat_map(|&i| {
                let corners = [(0.0,0.0),(0.0,9.0),(9.0,0.0),(9.0,9.0)];
                let (a,b) = corners[i]; [a,b]
            }).collect();
            for k in 1..=n {
                let m = fm(n, 2, data.clone());
                let c = advoice::feco::kmeans_cluster(&m, k, 777).unwrap();
                let best = partitions(n, k).iter().map(|a| sse(&data, n, 2, a, k)).fold(f64::INFINITY, f64::min);
                total_k += 1;
                if c.sse > best + 1e-9 { fail_k += 1; if fail_k < 9 { println!("KM2 n={n} k={k} data={data:?} got {} best {best}", c.sse); } }
            }
            let mut i = n; loop { if i == 0 { break; } i -= 1; idx[i] += 1; if idx[i] < 4 { break; } idx[i] = 0; }
            if idx.iter().all(|&x| x == 0) { break; }
        }
    }
    // warped: contiguous segmentations
    for n in 2..=8usize {
        let mut bits = 0u32;
        loop {
            let data: Vec<f64> = (0..n).map(|i| if bits >> i & 1 == 1 { 9.0 } else { 0.0 }).collect();
            for k in 1..=n {
                let m = fm(n, 1, data.clone());
                let c = advoice::feco::warped_kmeans_cluster(&m, k, 999).unwrap();
                // enumerate contiguous segmentations: choose k-1 boundaries among n-1
                let mut best = f64::INFINITY;
                let mut combo: Vec<usize> = (0..k-1).collect();
                loop {
                    let mut assign = vec![0usize; n];
                    let mut seg = 0; 
                    for i in 0..n { if seg < k-1 && i > combo[seg] { seg += 1; } assign[i] = seg; }
                    // combo[j] = index of last element of segment j
                    let s = sse(&data, n, 1, &assign, k);
                    if s < best { best = s; }
                    // next combination of k-1 items from 0..n-1
                    if k == 1 { break; }
                    let mut j = k - 1;
                    loop {
                        if j == 0 { break; }
                        j -= 1;
                        if combo[j] < n - 1 - (k - 1 - j) { combo[j] += 1; for l in j+1..k-1 { combo[l] = combo[l-1] + 1; } break; }
                        if j == 0 { break; }
                    }
                    if k > 1 && combo[0] > n - 1 - (k - 1) { break; }
                    if k == 1 { break; }
                    // termination: if we failed to increment
                    let done = (0..k-1).all(|l| combo[l] == n - (k-1) + l - 1 + 0);
                    let _ = done;
                    if combo[k-2] >= n - 1 { /* keep going until overflow detected above */ }
                    // simple guard
                    if combo.iter().enumerate().all(|(l, &c)| c == n - (k-1) + l - 1) { 
                        let mut assign = vec![0usize; n];
                        let mut seg = 0;
                        for i in 0..n { if seg < k-1 && i > combo[seg] { seg += 1; } assign[i] = seg; }
                        let s = sse(&data, n, 1, &assign, k);
                        if s < best { best = s; }
                        break; }
                }
                total_w += 1;
                if c.sse > best + 1e-9 { fail_w += 1; if fail_w < 6 { println!("WK n={n} k={k} data={data:?} got {} best {best}", c.sse); } }
            }
            bits += 1;
            if bits >> n != 0 { break; }
        }
    }
    println!("kmeans fails: {fail_k}/{total_k}; warped fails: {fail_w}/{total_w}");
}
