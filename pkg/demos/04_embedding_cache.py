# ---
# Fetching embeddings once
# ---
#
# The client posts {"model", "input"} to any embeddings endpoint and caches
# every vector on disk under sha256(model + "\0" + text). Here a fake
# transport stands in for the network so the demo runs offline.

# +
import json
import tempfile

import httpx
import numpy as np

from aealt.embed import EmbedClient, EmbedEndpointConfig, cache_stats

calls = []


def fake_endpoint(request: httpx.Request) -> httpx.Response:
    body = json.loads(request.content)
    calls.append(body["input"])
    vectors = [[len(t), t.count(" "), float(sum(map(ord, t)) % 97)] for t in body["input"]]
    return httpx.Response(200, json={"data": [{"embedding": v, "index": i} for i, v in enumerate(vectors)]})


cache_dir = tempfile.mkdtemp(prefix="aealt-cache-")
config = EmbedEndpointConfig(base_url="https://embeddings.invalid/v1/embeddings", model="toy", batch_size=2)
client = EmbedClient(config, cache_dir, transport=httpx.MockTransport(fake_endpoint))

docs = ["revenue grew", "guidance cut", "revenue grew", "new CEO named"]
emb = client.embed(docs)
print(emb.ids, emb.values.shape)
print("requests:", calls)
# -

# Duplicates were sent once, and a second pass is served from disk.

# +
again = EmbedClient(config, cache_dir, transport=httpx.MockTransport(fake_endpoint)).embed(docs)
print("new requests:", len(calls) - 2, "identical:", np.array_equal(emb.values, again.values))
print(cache_stats(cache_dir))
# -
