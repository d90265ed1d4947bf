"""
Сквозные тесты командной строки через cli.main: файлы, коды выхода и
детерминизм результатов.
"""

import json

import numpy as np
import pytest

import cli
from cli import (
    EXIT_BAD_FLAGS,
    EXIT_IO,
    EXIT_OK,
    EXIT_OPTIMIZER,
    EXIT_SEQUENCING,
    EXIT_UNDEFINED_AUC,
    atomic_writer,
    main,
    read_model,
    write_model,
)
from conftest import write_indexed
from ingestion import ParseError, read_batch_dir, read_examples


def synth(tmp_path, name='batches', *extra):
    directory = tmp_path / name
    code = main([
        'synth', '--batch-dir', str(directory), '--dim', '12', '--batches', '5',
        '--batch-size', '300', '--sparsity', '4', '--seed', '7', *extra,
    ])
    assert code == EXIT_OK
    return directory


def squared_batches(tmp_path):
    """Две небольшие батчи с полным рангом для квадратичной потери"""
    directory = tmp_path / 'squared'
    directory.mkdir()
    write_indexed(directory / 'batch_00000.txt', ['1 0:1.0 1:0.5', '0 1:2.0', '1 0:-1.0 2:1.0', '0 0:0.5 2:3.0'])
    write_indexed(directory / 'batch_00001.txt', ['1 1:1.0 2:1.0', '1 0:2.0', '0 0:1.0 1:1.0 2:1.0'])
    return directory


def dense(directory, dim):
    stream = read_batch_dir(directory, dim)
    X = np.vstack([b.matrix.toarray() for b in stream])
    Y = np.concatenate([b.labels for b in stream]).astype(float)
    return X, Y


# ---------------------------------------------------------------------------
# Флаги и коды выхода
# ---------------------------------------------------------------------------


class TestExitCodes:
    def test_unknown_flag(self, tmp_path):
        assert main(['train', '--batch-dir', str(tmp_path), '--model-out', 'm', '--bogus']) == EXIT_BAD_FLAGS

    def test_missing_required_flag(self, tmp_path):
        assert main(['train', '--batch-dir', str(tmp_path)]) == EXIT_BAD_FLAGS

    def test_invalid_numeric_flag(self, tmp_path):
        directory = synth(tmp_path)
        model = tmp_path / 'model.txt'
        assert main(['train', '--batch-dir', str(directory), '--model-out', str(model), '--memory', '0']) == EXIT_BAD_FLAGS
        assert main(['train', '--batch-dir', str(directory), '--model-out', str(model), '--threads', '0']) == EXIT_BAD_FLAGS
        assert not model.exists()

    def test_missing_batch_directory(self, tmp_path, capsys):
        absent = tmp_path / 'absent'
        code = main(['train', '--batch-dir', str(absent), '--model-out', str(tmp_path / 'm.txt')])
        assert code == EXIT_IO
        assert str(absent) in capsys.readouterr().err

    def test_gap_in_batches(self, tmp_path):
        directory = tmp_path / 'gap'
        directory.mkdir()
        write_indexed(directory / 'batch_00000.txt', ['1 0:1.0', '0 1:1.0'])
        write_indexed(directory / 'batch_00002.txt', ['1 0:1.0', '0 1:1.0'])
        code = main(['stream', '--batch-dir', str(directory), '--model-out', str(tmp_path / 'out' / 'm.txt')])
        assert code == EXIT_SEQUENCING
        assert not (tmp_path / 'out').exists() or not any((tmp_path / 'out').iterdir())

    def test_malformed_batch_file(self, tmp_path):
        directory = tmp_path / 'bad'
        directory.mkdir()
        write_indexed(directory / 'batch_00000.txt', ['1 0:1.0', 'x 1:1.0'])
        assert main(['train', '--batch-dir', str(directory), '--model-out', str(tmp_path / 'm.txt')]) == EXIT_IO

    def test_empty_data_file(self, tmp_path):
        model = tmp_path / 'model.txt'
        write_model(np.array([1.0]), model)
        data = tmp_path / 'empty.txt'
        data.write_text('', encoding='utf-8')
        assert main(['eval', '--model-in', str(model), '--data', str(data)]) == EXIT_IO

    def test_single_class_auc(self, tmp_path):
        model = tmp_path / 'model.txt'
        write_model(np.array([1.0, -1.0]), model)
        data = tmp_path / 'data.txt'
        write_indexed(data, ['1 0:1.0', '1 1:1.0'])
        assert main(['eval', '--model-in', str(model), '--data', str(data)]) == EXIT_UNDEFINED_AUC

    def test_singular_least_squares(self, tmp_path):
        directory = tmp_path / 'ls'
        directory.mkdir()
        write_indexed(directory / 'batch_00000.txt', ['1 0:1.0', '0 0:2.0'])
        assert main(['ls-stream', '--batch-dir', str(directory), '--dim', '2']) == EXIT_OPTIMIZER


# ---------------------------------------------------------------------------
# Модель
# ---------------------------------------------------------------------------


class TestModelFile:
    def test_round_trip(self, tmp_path):
        theta = np.array([0.0, 1.5, 0.0, -2.25e-7])
        write_model(theta, tmp_path / 'model.txt', bits=None)
        loaded, bits = read_model(tmp_path / 'model.txt')
        np.testing.assert_array_equal(loaded, theta)
        assert bits == 0
        lines = (tmp_path / 'model.txt').read_text(encoding='utf-8').splitlines()
        assert lines[0] == 'salbfgs-model v1 dim=4 bits=0'
        assert len(lines) == 3

    def test_bad_header(self, tmp_path):
        path = tmp_path / 'model.txt'
        path.write_text('something else\n', encoding='utf-8')
        with pytest.raises(ParseError):
            read_model(path)


class TestAtomicFiles:
    def test_content_is_visible_under_tmp_name_until_commit(self, tmp_path):
        target = tmp_path / 'out' / 'trace.txt'
        pending = tmp_path / 'out' / 'trace.txt.tmp'
        with atomic_writer(target) as handle:
            handle.write('t=0\n')
            handle.flush()
            assert pending.read_text(encoding='utf-8') == 't=0\n'
            assert not target.exists()
        assert target.read_text(encoding='utf-8') == 't=0\n'
        assert not pending.exists()

    def test_failure_leaves_no_files(self, tmp_path):
        with pytest.raises(RuntimeError):
            with atomic_writer(tmp_path / 'model.txt') as handle:
                handle.write('partial')
                raise RuntimeError('остановка')
        assert list(tmp_path.iterdir()) == []

    def test_stream_trace_grows_batch_by_batch(self, tmp_path, monkeypatch):
        directory = synth(tmp_path)
        pending = tmp_path / 'trace.txt.tmp'
        lines_seen = []
        run_stream = cli.run_stream

        def watched(stream, cfg, on_record=None, before_batch=None):
            def record(entry):
                on_record(entry)
                lines_seen.append(len(pending.read_text(encoding='utf-8').splitlines()))

            return run_stream(stream, cfg, on_record=record, before_batch=before_batch)

        monkeypatch.setattr(cli, 'run_stream', watched)
        code = main([
            'stream', '--batch-dir', str(directory), '--model-out', str(tmp_path / 'model.txt'),
            '--trace-out', str(tmp_path / 'trace.txt'),
        ])
        assert code == EXIT_OK
        assert lines_seen == [1, 2, 3, 4, 5]
        assert not pending.exists()
        assert len((tmp_path / 'trace.txt').read_text(encoding='utf-8').splitlines()) == 5


class TestTrain:
    def test_squared_loss_matches_normal_equations(self, tmp_path, capsys):
        directory = squared_batches(tmp_path)
        model = tmp_path / 'model.txt'
        code = main([
            'train', '--batch-dir', str(directory), '--model-out', str(model),
            '--loss', 'squared', '--grad-tol', '1e-10', '--max-iters', '200',
        ])
        assert code == EXIT_OK
        theta, _ = read_model(model)
        X, Y = dense(directory, 3)
        np.testing.assert_allclose(theta, np.linalg.solve(X.T @ X, X.T @ Y), atol=1e-6)
        summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert summary['batches'] == 2
        assert summary['examples'] == 7
        assert json.loads((tmp_path / 'model.txt.summary').read_text(encoding='utf-8')) == summary

    def test_repeated_runs_are_identical(self, tmp_path):
        directory = synth(tmp_path)
        outputs = []
        for name in ('a.txt', 'b.txt'):
            assert main(['train', '--batch-dir', str(directory), '--model-out', str(tmp_path / name), '--l2', '0.1']) == EXIT_OK
            outputs.append((tmp_path / name).read_bytes())
        assert outputs[0] == outputs[1]

    def test_thread_count_does_not_change_model(self, tmp_path):
        directory = synth(tmp_path)
        for threads in ('1', '8'):
            assert main([
                'train', '--batch-dir', str(directory), '--model-out', str(tmp_path / f'm{threads}.txt'),
                '--threads', threads, '--l2', '0.1',
            ]) == EXIT_OK
        assert (tmp_path / 'm1.txt').read_bytes() == (tmp_path / 'm8.txt').read_bytes()


class TestStream:
    def test_trace_has_record_per_batch(self, tmp_path):
        directory = synth(tmp_path)
        model = tmp_path / 'model.txt'
        assert main(['stream', '--batch-dir', str(directory), '--model-out', str(model), '--exact-mismatch']) == EXIT_OK
        lines = (tmp_path / 'model.txt.trace').read_text(encoding='utf-8').splitlines()
        assert len(lines) == 5
        assert [line.split()[0] for line in lines] == [f't={t}' for t in range(5)]
        assert all(line.endswith('seconds=-') for line in lines)

    def test_thread_count_does_not_change_outputs(self, tmp_path):
        directory = synth(tmp_path, 'batches', '--drift-at', '3', '--drift-fraction', '1.0')
        for threads in ('1', '8'):
            assert main([
                'stream', '--batch-dir', str(directory), '--model-out', str(tmp_path / f'm{threads}.txt'),
                '--threads', threads, '--m-old-min', '20', '--seed', '3',
            ]) == EXIT_OK
        assert (tmp_path / 'm1.txt').read_bytes() == (tmp_path / 'm8.txt').read_bytes()
        assert (tmp_path / 'm1.txt.trace').read_bytes() == (tmp_path / 'm8.txt.trace').read_bytes()

    def test_single_batch_equals_train(self, tmp_path):
        directory = tmp_path / 'one'
        directory.mkdir()
        source = synth(tmp_path)
        (directory / 'batch_00000.txt').write_bytes((source / 'batch_00000.txt').read_bytes())
        flags = ['--batch-dir', str(directory), '--l2', '0.5']
        assert main(['train', *flags, '--model-out', str(tmp_path / 'train.txt')]) == EXIT_OK
        assert main(['stream', *flags, '--model-out', str(tmp_path / 'stream.txt')]) == EXIT_OK
        assert (tmp_path / 'train.txt').read_bytes() == (tmp_path / 'stream.txt').read_bytes()

    def test_parallel_samplings_in_summary(self, tmp_path, capsys):
        directory = synth(tmp_path, 'batches', '--drift-at', '3', '--drift-fraction', '1.0')
        model = tmp_path / 'model.txt'
        code = main([
            'stream', '--batch-dir', str(directory), '--model-out', str(model),
            '--parallel-samplings', '3', '--m-old-min', '20', '--exact-mismatch',
        ])
        assert code == EXIT_OK
        summary = json.loads((tmp_path / 'model.txt.summary').read_text(encoding='utf-8'))
        assert summary['batches'] == 5
        for entry in summary.get('parallel_samplings', []):
            assert len(entry['held_out_errors']) == 3
            assert entry['consistent'] == (entry['dispersion'] <= 0.1)


class TestEval:
    def test_perfect_model(self, tmp_path, capsys):
        model = tmp_path / 'model.txt'
        write_model(np.array([2.0, -2.0]), model)
        data = tmp_path / 'data.txt'
        write_indexed(data, ['1 0:1.0', '0 1:1.0', '1 0:0.5', '0 1:3.0'])
        assert main(['eval', '--model-in', str(model), '--data', str(data), '--check']) == EXIT_OK
        out = capsys.readouterr().out
        assert 'auc=1.0' in out
        assert 'auc_brute_force=1.0' in out
        assert 'error_thresholded=0.0' in out

    def test_batch_directory_input(self, tmp_path, capsys):
        directory = synth(tmp_path)
        model = tmp_path / 'model.txt'
        assert main(['train', '--batch-dir', str(directory), '--model-out', str(model), '--l2', '0.1']) == EXIT_OK
        capsys.readouterr()
        summary = tmp_path / 'eval.json'
        assert main(['eval', '--model-in', str(model), '--batch-dir', str(directory), '--summary-out', str(summary)]) == EXIT_OK
        metrics = json.loads(summary.read_text(encoding='utf-8'))
        assert metrics['examples'] == 1500
        assert 0.5 < metrics['auc'] <= 1.0


class TestOtherCommands:
    def test_synth_is_deterministic(self, tmp_path):
        first = synth(tmp_path, 'a')
        second = synth(tmp_path, 'b')
        names = sorted(p.name for p in first.iterdir())
        assert names == [f'batch_{t:05d}.txt' for t in range(5)]
        for name in names:
            assert (first / name).read_bytes() == (second / name).read_bytes()
        assert all(len((first / name).read_text(encoding='utf-8').splitlines()) == 300 for name in names)

    def test_synth_drift_changes_only_later_batches(self, tmp_path):
        plain = synth(tmp_path, 'plain')
        drifted = synth(tmp_path, 'drifted', '--drift-at', '2', '--drift-fraction', '1.0')
        same = [(plain / f'batch_{t:05d}.txt').read_bytes() == (drifted / f'batch_{t:05d}.txt').read_bytes() for t in range(5)]
        assert same[:2] == [True, True]
        assert not any(same[2:])

    def test_ls_stream_unit_weight(self, tmp_path):
        directory = squared_batches(tmp_path)
        trace = tmp_path / 'ls.trace'
        assert main(['ls-stream', '--batch-dir', str(directory), '--mu', '1.0', '--trace-out', str(trace)]) == EXIT_OK
        lines = trace.read_text(encoding='utf-8').splitlines()
        assert len(lines) == 2
        theta = np.array([float(v) for v in lines[-1].split('theta=')[1].split(',')])
        X, Y = dense(directory, 3)
        np.testing.assert_allclose(theta, np.linalg.solve(X.T @ X, X.T @ Y), rtol=1e-8)

    def test_ls_stream_ridge(self, tmp_path, capsys):
        directory = tmp_path / 'ls'
        directory.mkdir()
        write_indexed(directory / 'batch_00000.txt', ['1 0:1.0', '0 0:2.0'])
        assert main(['ls-stream', '--batch-dir', str(directory), '--dim', '2', '--ridge']) == EXIT_OK
        assert 'ridge=true' in capsys.readouterr().out

    def test_online_trace(self, tmp_path):
        directory = synth(tmp_path)
        trace = tmp_path / 'online.trace'
        code = main([
            'online', '--batch-dir', str(directory), '--learner', 'adagrad', '--trace-out', str(trace),
            '--summary-out', str(tmp_path / 'online.json'), '--l2', '0.01',
        ])
        assert code == EXIT_OK
        lines = trace.read_text(encoding='utf-8').splitlines()
        assert len(lines) == 5
        summary = json.loads((tmp_path / 'online.json').read_text(encoding='utf-8'))
        assert summary['examples'] == 1500
        assert np.isfinite(summary['final_regret'])
        assert summary['learner'] == 'adagrad'

    def test_hash(self, tmp_path):
        source = tmp_path / 'raw.txt'
        source.write_text('1 |user u1 u2 |ad a9\n\n0 |user u3 |ad a1\n', encoding='utf-8')
        output = tmp_path / 'hashed.txt'
        code = main(['hash', '--input', str(source), '--output', str(output), '--hash-bits', '12', '--conjunction', 'user,ad'])
        assert code == EXIT_OK
        examples = read_examples(output)
        assert [e.label for e in examples] == [1, 0]
        assert all(e.features.max_index() < 4096 for e in examples)

    def test_hash_rejects_malformed_conjunction(self, tmp_path):
        source = tmp_path / 'raw.txt'
        source.write_text('1 |user u1\n', encoding='utf-8')
        code = main(['hash', '--input', str(source), '--output', str(tmp_path / 'o.txt'), '--conjunction', 'user'])
        assert code == EXIT_BAD_FLAGS

    def test_ctr(self, tmp_path):
        source = tmp_path / 'clicks.txt'
        source.write_text('ad:b 1 1 10 100\nad:a 2 1 5 100\n', encoding='utf-8')
        output = tmp_path / 'ctr.txt'
        assert main(['ctr', '--input', str(source), '--output', str(output)]) == EXIT_OK
        lines = output.read_text(encoding='utf-8').splitlines()
        assert [line.split()[0] for line in lines] == ['ad:a', 'ad:b']
        assert all(0 < float(line.split()[1]) < 1 for line in lines)

    def test_ctr_without_impressions(self, tmp_path):
        source = tmp_path / 'clicks.txt'
        source.write_text('ad:a 1 1 0 0\n', encoding='utf-8')
        assert main(['ctr', '--input', str(source), '--output', str(tmp_path / 'ctr.txt')]) == EXIT_IO
