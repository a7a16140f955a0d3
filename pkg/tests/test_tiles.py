import io
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
from PIL import Image

from deepi2t.grid import CellId, GridSpec
from deepi2t.synth import ARTERIAL, LINK_N, LINK_S, generate_city, synthetic_spec
from deepi2t.tiles import (
    IMAGE_SHAPE,
    PALETTE,
    TILE_PX,
    LayoutImage,
    RateLimiter,
    TileFetchError,
    TileFetcher,
    TileSource,
    cell_bbox,
    choose_zoom,
    downscale,
    fetch_region,
    lonlat_to_pixel,
    read_archive,
    render_city,
    render_synthetic_image,
    road_half_width,
    write_archive,
)


def _png(color):
    buf = io.BytesIO()
    Image.new("RGB", (TILE_PX, TILE_PX), color).save(buf, format="PNG")
    return buf.getvalue()


class TileServer:
    """Local XYZ server: each tile is a flat color derived from x, y; scripted failures per path."""

    def __init__(self):
        self.hits: list[str] = []
        self.missing: set[str] = set()
        self.flaky: dict[str, int] = {}
        outer = self

        class H(BaseHTTPRequestHandler):
            def do_GET(self):
                outer.hits.append(self.path)
                outer.agents.append(self.headers.get("User-Agent"))
                if self.path in outer.missing:
                    self.send_response(404)
                    self.end_headers()
                    return
                if outer.flaky.get(self.path, 0) > 0:
                    outer.flaky[self.path] -= 1
                    self.send_response(503)
                    self.end_headers()
                    return
                _, z, x, y = self.path.split("/")
                body = _png((int(x) % 256, int(y.split(".")[0]) % 256, 90))
                self.send_response(200)
                self.send_header("Content-Type", "image/png")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def log_message(self, *a):
                pass

        self.agents: list[str] = []
        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), H)
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self.thread.start()
        self.url = f"http://127.0.0.1:{self.httpd.server_port}/{{z}}/{{x}}/{{y}}.png"

    def close(self):
        self.httpd.shutdown()
        self.httpd.server_close()


@pytest.fixture
def server():
    s = TileServer()
    yield s
    s.close()


SPEC = GridSpec(-8.62, 41.15, 200.0, 3, 3)


def _src(server, tmp_path, **kw):
    base = dict(url_template=server.url, zoom=17, cache_dir=tmp_path / "cache", rate_limit=1000.0, user_agent="deepi2t-test/1.0", backoff=0.0)
    base.update(kw)
    return TileSource(**base)


def _tiles_for(cell, zoom=17):
    a, b, c, d = cell_bbox(SPEC, cell)
    x0, y0 = lonlat_to_pixel(a, d, zoom)
    x1, y1 = lonlat_to_pixel(c, b, zoom)
    return {(tx, ty) for tx in range(int(x0 // TILE_PX), int(np.ceil(x1 / TILE_PX))) for ty in range(int(y0 // TILE_PX), int(np.ceil(y1 / TILE_PX)))}


def test_cell_bbox_partition():
    assert cell_bbox(SPEC, CellId(0, 0))[:2] == (SPEC.min_lon, SPEC.min_lat)
    assert cell_bbox(SPEC, CellId(0, 0))[2] == cell_bbox(SPEC, CellId(1, 0))[0]
    assert cell_bbox(SPEC, CellId(0, 0))[3] == cell_bbox(SPEC, CellId(0, 1))[1]
    boxes = [cell_bbox(SPEC, CellId(c, r)) for c in range(3) for r in range(3)]
    assert min(b[0] for b in boxes) == SPEC.min_lon and max(b[2] for b in boxes) == float(SPEC.lon_edge(3))
    assert min(b[1] for b in boxes) == SPEC.min_lat and max(b[3] for b in boxes) == float(SPEC.lat_edge(3))


def test_choose_zoom():
    from deepi2t.tiles import meters_per_pixel

    # zoom 17 is ~0.90 m/px here, so a 200 m cell covers only ~222 px; zoom 18 covers ~444
    assert meters_per_pixel(41.15, 17) == pytest.approx(0.899, abs=1e-3)
    z = choose_zoom(200.0, 41.15)
    assert z == 18
    assert 200.0 / meters_per_pixel(41.15, z) >= 436 > 373 > 200.0 / meters_per_pixel(41.15, z - 1)
    assert choose_zoom(200.0, 41.15, min_px=200) == 17


def test_source_validation(server, tmp_path):
    with pytest.raises(ValueError, match="user_agent"):
        _src(server, tmp_path, user_agent="")
    with pytest.raises(ValueError):
        _src(server, tmp_path, rate_limit=0.0)
    with pytest.raises(ValueError):
        _src(server, tmp_path, url_template="http://x/{z}/{x}.png")


def test_fetch_then_cache(server, tmp_path):
    f = TileFetcher(_src(server, tmp_path))
    cell = CellId(1, 2)
    img = f.cell_image(SPEC, cell)
    assert isinstance(img, LayoutImage) and img.pixels.shape == IMAGE_SHAPE
    need = _tiles_for(cell)
    assert len(need) >= 2  # a multi-tile mosaic
    assert len(server.hits) == len(need)
    assert set(server.agents) == {"deepi2t-test/1.0"}
    again = TileFetcher(_src(server, tmp_path)).cell_image(SPEC, cell)
    assert len(server.hits) == len(need)  # served from cache
    np.testing.assert_array_equal(again.pixels, img.pixels)


def test_corrupt_cache_refetched(server, tmp_path):
    src = _src(server, tmp_path)
    f = TileFetcher(src)
    img = f.cell_image(SPEC, CellId(0, 0))
    f.cell_path(CellId(0, 0)).write_bytes(b"not a png")
    n = len(server.hits)
    f2 = TileFetcher(src)
    for tx, ty in _tiles_for(CellId(0, 0)):
        f2.tile_path(tx, ty).write_bytes(b"junk")
    again = f2.cell_image(SPEC, CellId(0, 0))
    assert len(server.hits) > n
    np.testing.assert_array_equal(again.pixels, img.pixels)


def test_404_names_tile(server, tmp_path):
    tx, ty = sorted(_tiles_for(CellId(2, 2)))[0]
    server.missing.add(f"/17/{tx}/{ty}.png")
    with pytest.raises(TileFetchError, match=f"17/{tx}/{ty}"):
        TileFetcher(_src(server, tmp_path)).cell_image(SPEC, CellId(2, 2))


def test_retry_on_server_error(server, tmp_path):
    tx, ty = sorted(_tiles_for(CellId(0, 1)))[0]
    path = f"/17/{tx}/{ty}.png"
    server.flaky[path] = 2
    TileFetcher(_src(server, tmp_path)).tile(tx, ty)
    assert server.hits.count(path) == 3
    server.flaky[f"/17/{tx + 7}/{ty}.png"] = 10
    with pytest.raises(TileFetchError, match="gave up after 4 attempts"):
        TileFetcher(_src(server, tmp_path)).tile(tx + 7, ty)


def test_region_fetch_concurrent(server, tmp_path):
    out = fetch_region(_src(server, tmp_path, concurrency=4), SPEC)
    assert len(out) == 9
    assert all(v.pixels.shape == IMAGE_SHAPE for v in out.values())
    # every tile the region needs was requested
    assert len(set(server.hits)) == len(set().union(*(_tiles_for(c) for c in out)))


class FakeClock:
    def __init__(self):
        self.t = 0.0

    def now(self):
        return self.t

    def sleep(self, s):
        self.t += s


@pytest.mark.parametrize("rate", [0.5, 1.0, 3.0, 7.5])
def test_rate_limiter_window(rate):
    clk = FakeClock()
    lim = RateLimiter(rate, clock=clk.now, sleep=clk.sleep)
    rng = np.random.default_rng(0)
    grants = []
    for _ in range(200):
        clk.t += float(rng.exponential(0.05))  # callers arrive faster than the limit
        grants.append(lim.acquire())
    g = np.array(grants)
    assert np.all(np.diff(g) >= 1.0 / rate - 1e-9)
    for s in np.concatenate([g, g - 10.0]):
        in_window = np.sum((g >= s) & (g < s + 10.0))
        assert in_window <= rate * 10.0 + 1e-9


def test_rate_limit_against_server(server, tmp_path):
    clk = FakeClock()
    lim = RateLimiter(2.0, clock=clk.now, sleep=clk.sleep)
    f = TileFetcher(_src(server, tmp_path, rate_limit=2.0), limiter=lim)
    f.cell_image(SPEC, CellId(1, 1))
    assert clk.t == pytest.approx((len(server.hits) - 1) * 0.5, rel=1e-5)


# -- synthetic rendering ------------------------------------------------------


@pytest.fixture(scope="module")
def city():
    return generate_city(5, synthetic_spec(20, 20))


def test_render_deterministic(city):
    a = render_synthetic_image(city, CellId(3, 4))
    b = render_synthetic_image(generate_city(5, synthetic_spec(20, 20)), CellId(3, 4))
    assert a.shape == IMAGE_SHAPE and a.dtype == np.uint8
    assert a.tobytes() == b.tobytes()


def test_empty_cell_is_background(city):
    empty = [
        (c, r)
        for c in range(20)
        for r in range(20)
        if city.road_class[c, r] == 0 and not city.water[c, r] and not city.park[c, r] and city.density[c, r] == 0 and not city.landmark[c, r]
    ]
    assert empty
    img = render_synthetic_image(city, CellId(*empty[0]))
    assert np.all(img.reshape(3, -1).T == np.array(PALETTE["background"], dtype=np.uint8))


def test_arterial_pixels(city):
    through = [
        (c, r)
        for c in range(20)
        for r in range(20)
        if city.road_class[c, r] == ARTERIAL and city.links[c, r] & LINK_N and city.links[c, r] & LINK_S and not city.water[c, r]
    ]
    assert through
    _, H, W = IMAGE_SHAPE
    strip = 2 * road_half_width(ARTERIAL, H, W) * H  # a full-height vertical band
    for c, r in through[:5]:
        img = render_synthetic_image(city, CellId(c, r))
        hits = np.all(img.reshape(3, -1).T == np.array(PALETTE["arterial"], dtype=np.uint8), axis=1).sum()
        assert hits >= 0.95 * strip


def test_archive_roundtrip(city, tmp_path):
    small = render_city(city, shape=(3, 54, 46))
    write_archive(tmp_path / "a.bin", city.spec, small, "0123456789abcdef")
    rasters, index, head = read_archive(tmp_path / "a.bin")
    assert head["config_hash"] == "0123456789abcdef" and head["shape"] == (3, 54, 46)
    assert np.array_equal(np.asarray(rasters), small)
    assert tuple(index[city.spec.cell_index(4, 7)]) == (4, 7)
    with pytest.raises(ValueError):
        write_archive(tmp_path / "b.bin", city.spec, small[:-1], "")


def test_downscale_box_filter():
    px = np.zeros((3, 4, 4), dtype=np.uint8)
    px[:, :2, :2] = 200
    out = downscale(px, (3, 2, 2))
    assert out[0].tolist() == [[200, 0], [0, 0]]
    assert downscale(px, (3, 4, 4)) is px
