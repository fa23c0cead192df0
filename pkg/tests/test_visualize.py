import nat_lattice.dat
import nat_lattice.metrics
import nat_lattice.visualize
import numpy as np
import pandas as pd
import os

def repetition_reports():
    return {
        'nat': nat_lattice.metrics.repetition_report([[5, 6, 5, 6, 5, 6]], n_min=2, n_max=4),
        'dat': nat_lattice.metrics.repetition_report([[5, 6, 7]], n_min=2, n_max=4)
    }

def test_ngram_repetition_df():
    df = nat_lattice.visualize.ngram_repetition_df(repetition_reports())
    assert list(df.columns) == ['method', 'n', 'count']
    nat_counts = df.loc[df['method'] == 'nat'].set_index('n')['count'].to_dict()
    assert nat_counts == {2: 2, 3: 2, 4: 1}
    assert df.loc[df['method'] == 'dat', 'count'].sum() == 0

def test_plot_ngram_repetition_saves(tmp_path):
    df = nat_lattice.visualize.ngram_repetition_df(repetition_reports())
    path = nat_lattice.visualize.plot_ngram_repetition(
        df,
        show=False,
        save=True,
        save_directory=str(tmp_path),
        file_identifier='Copy Task'
    )
    assert os.path.basename(path) == 'ngram_repetition_copy-task.png'
    assert os.path.exists(path)

def test_plot_ngram_repetition_empty():
    df = nat_lattice.visualize.ngram_repetition_df(dict())
    assert nat_lattice.visualize.plot_ngram_repetition(df, show=False, save=True) is None

def test_plot_transition_matrix(tmp_path):
    transition = nat_lattice.dat.TransitionMatrix.from_scores(np.random.default_rng(0).normal(size=(5, 5)))
    path = nat_lattice.visualize.plot_transition_matrix(
        transition,
        annotate=True,
        show=False,
        save=True,
        save_directory=str(tmp_path)
    )
    assert os.path.exists(path)

def test_plot_loss_history(tmp_path):
    df = pd.DataFrame({
        'epoch': [1, 2, 1, 2],
        'mean_loss': [3.0, 2.0, 4.0, 3.5],
        'objective': ['ctc', 'ctc', 'cmlm', 'cmlm']
    })
    path = nat_lattice.visualize.plot_loss_history(
        df,
        show=False,
        save=True,
        save_directory=str(tmp_path),
        filename_extension='pdf'
    )
    assert path.endswith('loss_history.pdf')
    assert os.path.exists(path)

def test_plot_without_save_returns_none():
    df = pd.DataFrame({'epoch': [1, 2], 'mean_loss': [1.0, 0.5]})
    assert nat_lattice.visualize.plot_loss_history(df, show=False) is None
